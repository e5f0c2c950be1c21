//! Dense tensors, tape autodiff, and the optimizer.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::grad_check;
pub use graph::{softmax_in_place, AllowMatrix, Gradients, Graph, OpKind, ParamId, Var};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::ParamStore;
pub use tensor::{DType, Float, Tensor};
