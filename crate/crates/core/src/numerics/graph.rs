//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends a node holding its output and whatever the
//! backward rule needs. `Graph::backward` consumes the tape and walks it in
//! reverse, so each node is visited exactly once.
//!
//! Broadcasting is limited to what the model needs: exact shape match for
//! elementwise ops, a trailing-axis row vector for `add_row`/`mul_row`, and
//! scalar multiplication through `scale`. Everything else is a shape error.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Index of a trainable tensor in a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNT,
    Add,
    AddRow,
    Mul,
    MulRow,
    Scale,
    Relu,
    Softmax,
    LayerNorm,
    Transpose,
    Reshape,
    Mean,
    Mse,
    GatherRows,
    ScatterRows,
    ConcatRows,
    Dropout,
    Attention,
}

enum Op<F> {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Transpose(Var),
    Reshape(Var),
    Mean(Var),
    Mse(Var, Var),
    GatherRows {
        table: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        dest: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Attention(Box<AttentionSaved<F>>),
}

struct AttentionSaved<F> {
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    heads: usize,
    scale: F,
    /// Post-softmax weights, `heads × s × s`.
    probs: Vec<F>,
    /// Inverted-dropout multipliers on the weights, same layout as `probs`.
    drop: Option<Vec<F>>,
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNT(..) => OpKind::MatMulNT,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Mul(..) => OpKind::Mul,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Mean(..) => OpKind::Mean,
            Op::Mse(..) => OpKind::Mse,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Attention(..) => OpKind::Attention,
        }
    }
}

/// One tape entry: the op, its output, and a flag saying whether any
/// gradient has to flow through it.
struct TapeNode<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Block attention allow-matrix, row-major `s × s`; `true` means the query
/// (row) may read the key (column).
pub type AllowMatrix = Rc<Vec<bool>>;

pub struct Graph<F> {
    nodes: Vec<TapeNode<F>>,
    params: HashMap<ParamId, Var>,
    flops: u64,
    payload_bytes: u64,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub params: BTreeMap<ParamId, Tensor<F>>,
    pub leaves: BTreeMap<Var, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v)
    }

    /// Adds `other` into `self`, key by key.
    pub fn accumulate(&mut self, other: Gradients<F>) {
        for (k, t) in other.params {
            match self.params.get_mut(&k) {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(a, &b)| *a += b),
                None => {
                    self.params.insert(k, t);
                }
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn empty() -> Self {
        Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        }
    }
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            flops: 0,
            payload_bytes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating-point operations (2 per multiply-add) issued by matrix
    /// products and attention since the graph was created.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    /// Bytes of tensor payload held by the tape (outputs plus saved
    /// activations). Nothing is freed before the graph is dropped, so this
    /// is also the peak.
    pub fn payload_bytes(&self) -> u64 {
        self.payload_bytes
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        match shape.len() {
            0 => (1, 1),
            1 => (1, shape[0]),
            _ => {
                let cols = *shape.last().unwrap();
                (self.nodes[v.0].value.len() / cols.max(1), cols)
            }
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        let saved = match &op {
            Op::LayerNorm { xhat, rstd, .. } => xhat.len() + rstd.len(),
            Op::Dropout { mask, .. } => mask.len(),
            Op::Attention(a) => a.probs.len() + a.drop.as_ref().map_or(0, Vec::len),
            _ => 0,
        };
        self.payload_bytes += ((value.len() + saved) * F::BYTES) as u64;
        self.nodes.push(TapeNode {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    /// Records a tensor as a leaf; it receives a gradient when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf { param: None }, false))
    }

    /// Records a trainable parameter once per graph; repeated calls with
    /// the same id return the same node.
    pub fn param(&mut self, id: ParamId, t: &Tensor<F>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        );
        self.params.insert(id, v);
        v
    }

    /// Copy of `x` with the gradient path cut.
    pub fn detach(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].shape.clone();
        let value = self.nodes[x.0].value.clone();
        self.push(shape, value, Op::Leaf { param: None }, false)
    }

    // ---- products -----------------------------------------------------

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::mm(self.value(a), self.value(b), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err(
                "matmul_nt",
                format!("cannot multiply {sa:?} by transpose of {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = kernels::mm_nt(self.value(a), self.value(b), m, k, n);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), rg))
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    fn check_row(&self, op: &str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (rows, cols) = self.dims2(a);
        let rshape = self.shape(row);
        if self.value(row).len() != cols || rshape.len() > 2 || (rshape.len() == 2 && rshape[0] != 1)
        {
            return Err(shape_err(
                op,
                format!(
                    "row operand {:?} does not match trailing axis of {:?}",
                    rshape,
                    self.shape(a)
                ),
            ));
        }
        Ok((rows, cols))
    }

    /// Adds a length-`n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.check_row("add_row", a, row)?;
        let mut out = self.value(a).to_vec();
        let r = self.value(row);
        for i in 0..rows {
            for (x, &y) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (rows, cols) = self.check_row("mul_row", a, row)?;
        let mut out = self.value(a).to_vec();
        let r = self.value(row);
        for i in 0..rows {
            for (x, &y) in out[i * cols..(i + 1) * cols].iter_mut().zip(r) {
                *x *= y;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(self.shape(a).to_vec(), out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), rg)
    }

    /// Softmax over the last axis, computed with max subtraction. A row
    /// that is entirely `-inf` yields all zeros.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (rows, cols) = self.dims2(a);
        let mut out = self.value(a).to_vec();
        for i in 0..rows {
            softmax_in_place(&mut out[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg)
    }

    /// Row-wise layer normalization followed by a learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, offset)?;
        let eps = F::from_f64(eps);
        let n = F::from_f64(cols as f64);
        let xv = self.value(x);
        let (g, o) = (self.value(gain), self.value(offset));
        let mut xhat = vec![F::zero(); rows * cols];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * cols];
        for i in 0..rows {
            let row = &xv[i * cols..(i + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for c in 0..cols {
                let h = (row[c] - mean) * r;
                xhat[i * cols + c] = h;
                out[i * cols + c] = h * g[c] + o[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(offset);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("expected a matrix, got {s:?}")));
        }
        let out = kernels::transpose(self.value(a), s[0], s[1]);
        let rg = self.rg(a);
        Ok(self.push(vec![s[1], s[0]], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Reshape(a), rg))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().copied().sum::<F>() / F::from_f64(v.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(vec![], vec![m], Op::Mean(a), rg)
    }

    /// Mean squared error over all elements (gradient factor `2/n`).
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = F::from_f64(p.len().max(1) as f64);
        let m = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<F>()
            / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![], vec![m], Op::Mse(pred, target), rg))
    }

    // ---- indexing -----------------------------------------------------

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(shape_err(
                    "gather_rows",
                    format!("row {i} out of range for {:?}", self.shape(table)),
                ));
            }
            out.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![index.len(), cols],
            out,
            Op::GatherRows {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `i` of `src` at row `dest[i]` of a zero `rows×cols`
    /// matrix. Destinations must be distinct.
    pub fn scatter_rows(&mut self, src: Var, dest: &[usize], rows: usize) -> Result<Var> {
        let (srows, cols) = self.dims2(src);
        if dest.len() != srows {
            return Err(shape_err(
                "scatter_rows",
                format!("{} destinations for {srows} rows", dest.len()),
            ));
        }
        let mut seen = vec![false; rows];
        let mut out = vec![F::zero(); rows * cols];
        let s = self.value(src);
        for (i, &d) in dest.iter().enumerate() {
            if d >= rows || seen[d] {
                return Err(shape_err(
                    "scatter_rows",
                    format!("destination {d} invalid or repeated (rows = {rows})"),
                ));
            }
            seen[d] = true;
            out[d * cols..(d + 1) * cols].copy_from_slice(&s[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(src);
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::ScatterRows {
                src,
                dest: dest.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no operands".into()));
        }
        let cols = self.dims2(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p);
            if c != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column counts {cols} and {c} differ"),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Inverted dropout. `rate == 0` records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg)
    }

    /// Multi-head scaled dot-product attention with an additive bias:
    /// per head, `softmax(Q_h K_hᵀ · scale + B) V_h` over allowed keys,
    /// heads concatenated along columns.
    ///
    /// `bias`, when given, is an `s×s` matrix shared by all heads. Keys
    /// that are disallowed by `allow` or carry a `-inf` bias get zero
    /// weight; a query row with no usable key outputs zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        allow: &[bool],
        heads: usize,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        let (s, d) = self.dims2(q);
        if self.dims2(k) != (s, d) || self.dims2(v) != (s, d) {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?} must all be s×d",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("{heads} heads do not divide width {d}"),
            ));
        }
        if allow.len() != s * s {
            return Err(shape_err(
                "attention",
                format!("mask has {} entries, expected {}", allow.len(), s * s),
            ));
        }
        if let Some(b) = bias {
            if self.dims2(b) != (s, s) || self.value(b).len() != s * s {
                return Err(shape_err(
                    "attention",
                    format!("bias {:?} must be {s}×{s}", self.shape(b)),
                ));
            }
        }
        let dk = d / heads;
        let scale = F::from_f64(1.0 / (dk as f64).sqrt());
        let mut probs = vec![F::zero(); heads * s * s];
        let mut out = vec![F::zero(); s * d];
        let drop_rate = dropout.as_ref().map_or(0.0, |(r, _)| *r);
        let mut drop = None;
        if drop_rate > 0.0 {
            let (_, rng) = dropout.unwrap();
            let keep = F::from_f64(1.0 / (1.0 - drop_rate));
            drop = Some(
                (0..heads * s * s)
                    .map(|_| {
                        if rng.gen::<f64>() < drop_rate {
                            F::zero()
                        } else {
                            keep
                        }
                    })
                    .collect::<Vec<F>>(),
            );
        }
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let bv = bias.map(|b| self.value(b));
            for h in 0..heads {
                let qh = kernels::col_block(qv, s, d, h * dk, dk);
                let kh = kernels::col_block(kv, s, d, h * dk, dk);
                let vh = kernels::col_block(vv, s, d, h * dk, dk);
                let p = &mut probs[h * s * s..(h + 1) * s * s];
                kernels::mm_nt_acc(&qh, &kh, p, s, dk, s);
                for a in 0..s {
                    let row = &mut p[a * s..(a + 1) * s];
                    for b in 0..s {
                        row[b] = if allow[a * s + b] {
                            let x = row[b] * scale;
                            match bv {
                                Some(bv) => x + bv[a * s + b],
                                None => x,
                            }
                        } else {
                            F::neg_infinity()
                        };
                    }
                    softmax_in_place(row);
                }
                let mut oh = vec![F::zero(); s * dk];
                match &drop {
                    Some(m) => {
                        let pd: Vec<F> = p
                            .iter()
                            .zip(&m[h * s * s..(h + 1) * s * s])
                            .map(|(&a, &b)| a * b)
                            .collect();
                        kernels::mm_acc(&pd, &vh, &mut oh, s, s, dk);
                    }
                    None => kernels::mm_acc(p, &vh, &mut oh, s, s, dk),
                }
                kernels::add_col_block(&mut out, s, d, h * dk, dk, &oh);
            }
        }
        self.flops += 4 * (s * s * d) as u64;
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![s, d],
            out,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                bias,
                heads,
                scale,
                probs,
                drop,
            })),
            rg,
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Consumes the tape and returns gradients of the scalar `loss` with
    /// respect to every parameter and grad-requiring leaf reachable from it.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::empty();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| -> &[F] { &nodes[v.0].value };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let dims = |v: Var| -> (usize, usize) {
                let shape = &nodes[v.0].shape;
                match shape.len() {
                    0 => (1, 1),
                    1 => (1, shape[0]),
                    _ => {
                        let c = *shape.last().unwrap();
                        (nodes[v.0].value.len() / c.max(1), c)
                    }
                }
            };
            match &node.op {
                Op::Leaf { param } => {
                    let t = Tensor::new(node.shape.clone(), g)?;
                    match param {
                        Some(id) => {
                            out.params.insert(*id, t);
                        }
                        None => {
                            out.leaves.insert(Var(i), t);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims(*a);
                    let n = dims(*b).1;
                    if needs(*a) {
                        let ga = acc_slot(&mut grads, *a, m * k);
                        kernels::mm_nt_acc(&g, val(*b), ga, m, n, k);
                    }
                    if needs(*b) {
                        let gb = acc_slot(&mut grads, *b, k * n);
                        kernels::mm_tn_acc(val(*a), &g, gb, m, k, n);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = dims(*a);
                    let n = dims(*b).0;
                    if needs(*a) {
                        let ga = acc_slot(&mut grads, *a, m * k);
                        kernels::mm_acc(&g, val(*b), ga, m, n, k);
                    }
                    if needs(*b) {
                        let gb = acc_slot(&mut grads, *b, n * k);
                        kernels::mm_tn_acc(&g, val(*a), gb, m, n, k);
                    }
                }
                Op::Add(a, b) => {
                    for x in [*a, *b] {
                        if needs(x) {
                            add_into(acc_slot(&mut grads, x, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    let (rows, cols) = dims(*a);
                    if needs(*a) {
                        add_into(acc_slot(&mut grads, *a, g.len()), &g);
                    }
                    if needs(*r) {
                        let gr = acc_slot(&mut grads, *r, cols);
                        for i in 0..rows {
                            add_into(gr, &g[i * cols..(i + 1) * cols]);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let ga = acc_slot(&mut grads, *a, g.len());
                        for ((x, &gi), &bv) in ga.iter_mut().zip(&g).zip(val(*b)) {
                            *x += gi * bv;
                        }
                    }
                    if needs(*b) {
                        let gb = acc_slot(&mut grads, *b, g.len());
                        for ((x, &gi), &av) in gb.iter_mut().zip(&g).zip(val(*a)) {
                            *x += gi * av;
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (rows, cols) = dims(*a);
                    if needs(*a) {
                        let rv = val(*r);
                        let ga = acc_slot(&mut grads, *a, g.len());
                        for i in 0..rows {
                            for c in 0..cols {
                                ga[i * cols + c] += g[i * cols + c] * rv[c];
                            }
                        }
                    }
                    if needs(*r) {
                        let av = val(*a);
                        let gr = acc_slot(&mut grads, *r, cols);
                        for i in 0..rows {
                            for c in 0..cols {
                                gr[c] += g[i * cols + c] * av[i * cols + c];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = acc_slot(&mut grads, *a, g.len());
                    for (x, &gi) in ga.iter_mut().zip(&g) {
                        *x += gi * *c;
                    }
                }
                Op::Relu(a) => {
                    let ga = acc_slot(&mut grads, *a, g.len());
                    for ((x, &gi), &y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        if y > F::zero() {
                            *x += gi;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let (rows, cols) = dims(*a);
                    let ga = acc_slot(&mut grads, *a, g.len());
                    for i in 0..rows {
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gy = &g[i * cols..(i + 1) * cols];
                        let dotp = kernels::dot(y, gy);
                        for c in 0..cols {
                            ga[i * cols + c] += y[c] * (gy[c] - dotp);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    rstd,
                } => {
                    let (rows, cols) = dims(*x);
                    let gv = val(*gain);
                    if needs(*gain) {
                        let gg = acc_slot(&mut grads, *gain, cols);
                        for i in 0..rows {
                            for c in 0..cols {
                                gg[c] += g[i * cols + c] * xhat[i * cols + c];
                            }
                        }
                    }
                    if needs(*offset) {
                        let go = acc_slot(&mut grads, *offset, cols);
                        for i in 0..rows {
                            add_into(go, &g[i * cols..(i + 1) * cols]);
                        }
                    }
                    if needs(*x) {
                        let n = F::from_f64(cols as f64);
                        let gx = acc_slot(&mut grads, *x, rows * cols);
                        let mut dxhat = vec![F::zero(); cols];
                        for i in 0..rows {
                            for c in 0..cols {
                                dxhat[c] = g[i * cols + c] * gv[c];
                            }
                            let xh = &xhat[i * cols..(i + 1) * cols];
                            let mean_d = dxhat.iter().copied().sum::<F>() / n;
                            let mean_dx = kernels::dot(&dxhat, xh) / n;
                            for c in 0..cols {
                                gx[i * cols + c] += rstd[i] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = dims(*a);
                    let gt = kernels::transpose(&g, c, r);
                    add_into(acc_slot(&mut grads, *a, g.len()), &gt);
                }
                Op::Reshape(a) => {
                    add_into(acc_slot(&mut grads, *a, g.len()), &g);
                }
                Op::Mean(a) => {
                    let n = val(*a).len();
                    let share = g[0] / F::from_f64(n.max(1) as f64);
                    for x in acc_slot(&mut grads, *a, n).iter_mut() {
                        *x += share;
                    }
                }
                Op::Mse(p, t) => {
                    let n = val(*p).len();
                    let c = g[0] * F::from_f64(2.0 / n.max(1) as f64);
                    let (pv, tv) = (val(*p), val(*t));
                    if needs(*p) {
                        let gp = acc_slot(&mut grads, *p, n);
                        for i in 0..n {
                            gp[i] += c * (pv[i] - tv[i]);
                        }
                    }
                    if needs(*t) {
                        let gt = acc_slot(&mut grads, *t, n);
                        for i in 0..n {
                            gt[i] -= c * (pv[i] - tv[i]);
                        }
                    }
                }
                Op::GatherRows { table, index } => {
                    let (rows, cols) = dims(*table);
                    let gt = acc_slot(&mut grads, *table, rows * cols);
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut gt[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::ScatterRows { src, dest } => {
                    let (srows, cols) = dims(*src);
                    let gs = acc_slot(&mut grads, *src, srows * cols);
                    for (r, &d) in dest.iter().enumerate() {
                        add_into(&mut gs[r * cols..(r + 1) * cols], &g[d * cols..(d + 1) * cols]);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if needs(p) {
                            add_into(acc_slot(&mut grads, p, n), &g[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx = acc_slot(&mut grads, *x, g.len());
                    for ((a, &gi), &m) in gx.iter_mut().zip(&g).zip(mask) {
                        *a += gi * m;
                    }
                }
                Op::Attention(saved) => {
                    attention_backward(&nodes, &mut grads, saved, &g, &dims);
                }
            }
        }
        Ok(out)
    }
}

fn attention_backward<F: Float>(
    nodes: &[TapeNode<F>],
    grads: &mut [Option<Vec<F>>],
    a: &AttentionSaved<F>,
    g: &[F],
    dims: &dyn Fn(Var) -> (usize, usize),
) {
    let (s, d) = dims(a.q);
    let heads = a.heads;
    let dk = d / heads;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let (qv, kv, vv) = (&nodes[a.q.0].value, &nodes[a.k.0].value, &nodes[a.v.0].value);
    let mut dq = vec![F::zero(); s * d];
    let mut dk_all = vec![F::zero(); s * d];
    let mut dv = vec![F::zero(); s * d];
    let mut dbias = a.bias.filter(|&b| needs(b)).map(|_| vec![F::zero(); s * s]);

    for h in 0..heads {
        let p = &a.probs[h * s * s..(h + 1) * s * s];
        let qh = kernels::col_block(qv, s, d, h * dk, dk);
        let kh = kernels::col_block(kv, s, d, h * dk, dk);
        let vh = kernels::col_block(vv, s, d, h * dk, dk);
        let goh = kernels::col_block(g, s, d, h * dk, dk);

        // Weights actually applied to V (after dropout).
        let applied: Vec<F> = match &a.drop {
            Some(m) => p
                .iter()
                .zip(&m[h * s * s..(h + 1) * s * s])
                .map(|(&x, &y)| x * y)
                .collect(),
            None => p.to_vec(),
        };
        let mut dvh = vec![F::zero(); s * dk];
        kernels::mm_tn_acc(&applied, &goh, &mut dvh, s, s, dk);
        kernels::add_col_block(&mut dv, s, d, h * dk, dk, &dvh);

        let mut dp = kernels::mm_nt(&goh, &vh, s, dk, s);
        if let Some(m) = &a.drop {
            for (x, &y) in dp.iter_mut().zip(&m[h * s * s..(h + 1) * s * s]) {
                *x *= y;
            }
        }
        // dS = P ⊙ (dP − rowsum(P ⊙ dP))
        for r in 0..s {
            let pr = &p[r * s..(r + 1) * s];
            let dr = &mut dp[r * s..(r + 1) * s];
            let dotp = kernels::dot(pr, dr);
            for c in 0..s {
                dr[c] = pr[c] * (dr[c] - dotp);
            }
        }
        if let Some(db) = dbias.as_mut() {
            add_into(db, &dp);
        }
        let mut dqh = vec![F::zero(); s * dk];
        kernels::mm_acc(&dp, &kh, &mut dqh, s, s, dk);
        let mut dkh = vec![F::zero(); s * dk];
        kernels::mm_tn_acc(&dp, &qh, &mut dkh, s, s, dk);
        for x in dqh.iter_mut().chain(dkh.iter_mut()) {
            *x *= a.scale;
        }
        kernels::add_col_block(&mut dq, s, d, h * dk, dk, &dqh);
        kernels::add_col_block(&mut dk_all, s, d, h * dk, dk, &dkh);
    }
    if needs(a.q) {
        add_into(acc_slot(grads, a.q, s * d), &dq);
    }
    if needs(a.k) {
        add_into(acc_slot(grads, a.k, s * d), &dk_all);
    }
    if needs(a.v) {
        add_into(acc_slot(grads, a.v, s * d), &dv);
    }
    if let (Some(b), Some(db)) = (a.bias, dbias) {
        add_into(acc_slot(grads, b, s * s), &db);
    }
}

fn acc_slot<F: Float>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Numerically stable softmax of one row; an all-`-inf` row becomes zeros.
pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if !max.is_finite() {
        row.iter_mut().for_each(|x| *x = F::zero());
        return;
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_returns_input() {
        let mut g = Graph::<f64>::new();
        let i2 = g.leaf(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.leaf(&t64(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]));
        let y = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[2], &[0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_translation_invariant() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[3], &[1.0, 2.0, 3.0]));
        let xc = g.leaf(&t64(&[3], &[8.0, 9.0, 10.0]));
        let (a, b) = (g.softmax(x), g.softmax(xc));
        for (p, q) in g.value(a).iter().zip(g.value(b)) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant([2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant([2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant([3], vec![0.0; 3]).unwrap();
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[], &[3.0]).with_grad());
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.leaf(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mse_gradient_uses_mean_convention() {
        let mut g = Graph::<f64>::new();
        let y = g.leaf(&t64(&[2], &[1.0, 0.0]).with_grad());
        let t = g.constant([2], vec![0.0, 0.0]).unwrap();
        let l = g.mse(y, t).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.leaf(y).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let y = g.leaf(&t64(&[2], &[1.0, 0.0]).with_grad());
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_params_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(ParamId(0), &t64(&[1], &[2.0]));
        let _b = g.param(ParamId(1), &t64(&[1], &[5.0]));
        let l = g.mean(a);
        let grads = g.backward(l).unwrap();
        assert!(grads.param(ParamId(0)).is_some());
        assert!(grads.param(ParamId(1)).is_none());
    }

    #[test]
    fn param_leaf_is_recorded_once() {
        let mut g = Graph::<f32>::new();
        let t = Tensor::<f32>::zeros([2]);
        let a = g.param(ParamId(3), &t);
        let b = g.param(ParamId(3), &t);
        assert_eq!(a, b);
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn all_masked_attention_row_outputs_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let allow = vec![false, false, true, true];
        let y = g
            .attention::<rand::rngs::ThreadRng>(x, x, x, None, &allow, 1, None)
            .unwrap();
        assert_eq!(&g.value(y)[..2], &[0.0, 0.0]);
        assert!(g.value(y)[2..].iter().all(|v| v.is_finite()));
    }
}
