pub mod bench;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod model;
pub mod numerics;
pub mod relevance;
pub mod tokenizer;

pub use error::{Error, Result};
