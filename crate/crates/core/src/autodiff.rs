//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns every node of one computation. Ops append nodes and
//! return [`NodeId`]s; the tape is append-only, so ids already form a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Gradients flow only into subgraphs rooted at trainable leaves
//! ([`Tape::param`]); anything bound with [`Tape::constant`] is opaque to
//! backward, which is how teacher networks and data batches are kept
//! gradient-free.
//!
//! In [`FloatMode::F32`] every produced buffer (values and gradients) is
//! rounded to f32 precision; arithmetic itself always runs in f64.

use crate::tensor::{
    matmul, matmul_transa, matmul_transb, resample3d, resample3d_adjoint, transpose2d, FloatMode,
    Tensor, TensorError,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cosine similarity over a zero-norm row (row {0})")]
    ZeroNormRow(usize),
    #[error("dropout probability {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("gather id {id} out of range for {rows} rows")]
    BadGatherId { id: usize, rows: usize },
}

type AdResult<T> = Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row id passed to [`Tape::gather_rows`] that produces an all-zero row and
/// receives no gradient. Stands in for padding / out-of-volume positions.
pub const GATHER_ZERO_ROW: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulConst(NodeId, f64),
    AddConst(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    LayerNorm { x: NodeId, eps: f64 },
    SoftmaxT { x: NodeId, tau: f64 },
    LogSoftmaxT { x: NodeId, tau: f64 },
    CrossEntropy { logits: NodeId, targets: NodeId, tau: f64 },
    Dropout { x: NodeId, scale: f64, mask: Vec<bool> },
    GatherRows { x: NodeId, ids: Vec<usize> },
    CosineSim(NodeId, NodeId),
    L1Mean(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    L2NormalizeRows(NodeId),
    DivByScalar { x: NodeId, s: NodeId },
    Resample3D { x: NodeId, in_grid: [usize; 3], out_grid: [usize; 3] },
}

impl Op {
    fn parents(&self, out: &mut Vec<NodeId>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Matmul(a, b)
            | Op::CosineSim(a, b)
            | Op::L1Mean(a, b)
            | Op::Minimum(a, b)
            | Op::Maximum(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            Op::CrossEntropy { logits, targets, .. } => {
                out.push(*logits);
                out.push(*targets);
            }
            Op::DivByScalar { x, s } => {
                out.push(*x);
                out.push(*s);
            }
            Op::Concat { parts, .. } => out.extend_from_slice(parts),
            Op::MulConst(x, _)
            | Op::AddConst(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Slice { x, .. }
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::LayerNorm { x, .. }
            | Op::SoftmaxT { x, .. }
            | Op::LogSoftmaxT { x, .. }
            | Op::Dropout { x, .. }
            | Op::GatherRows { x, .. }
            | Op::L2NormalizeRows(x)
            | Op::Resample3D { x, .. } => out.push(*x),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `id`, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the given shape when the node was unreachable.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    mode: FloatMode,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Interpret a tensor as rows over its last axis.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / cols;
    (rows, cols)
}

/// Row-wise softmax with max subtraction, logits pre-divided by tau.
fn softmax_rows(x: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row.iter()) {
            let e = ((xi - m) / tau).exp();
            *oi = e;
            z += e;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

fn slice_bounds(
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
    op: &'static str,
) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::IndexOutOfRange { op, index: axis, len: shape.len() });
    }
    if len == 0 || start + len > shape[axis] {
        return Err(TensorError::IndexOutOfRange { op, index: start + len, len: shape[axis] });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    pub fn new(mode: FloatMode) -> Tape {
        Tape { nodes: Vec::new(), mode }
    }

    pub fn mode(&self) -> FloatMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.index()].value.shape()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        value.round_to_mode(self.mode);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.index()].requires_grad)
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf: data, labels, teacher weights.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), self.needs(&[a, b])))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), self.needs(&[a, b])))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), self.needs(&[a, b])))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), self.needs(&[a, b])))
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "minimum", f64::min)?;
        Ok(self.push(v, Op::Minimum(a, b), self.needs(&[a, b])))
    }

    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "maximum", f64::max)?;
        Ok(self.push(v, Op::Maximum(a, b), self.needs(&[a, b])))
    }

    /// Broadcast-add a length-d row vector onto every row of x.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> AdResult<NodeId> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(row).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            }
            .into());
        }
        let xv = self.value(x).data();
        let rv = self.value(row).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = xv[r * cols + c] + rv[c];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(v, Op::AddRow(x, row), self.needs(&[x, row])))
    }

    /// Broadcast-multiply every row of x by a length-d row vector.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> AdResult<NodeId> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.value(row).len() != cols {
            return Err(TensorError::ShapeMismatch {
                op: "mul_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            }
            .into());
        }
        let xv = self.value(x).data();
        let rv = self.value(row).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] = xv[r * cols + c] * rv[c];
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(v, Op::MulRow(x, row), self.needs(&[x, row])))
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::MulConst(x, c), self.needs(&[x]))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v + c);
        self.push(v, Op::AddConst(x), self.needs(&[x]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            }
            .into());
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::Matmul(a, b), self.needs(&[a, b])))
    }

    pub fn transpose(&mut self, x: NodeId) -> AdResult<NodeId> {
        let (m, n) = self.value(x).dims2("transpose")?;
        let data = transpose2d(self.value(x).data(), m, n);
        let v = Tensor::new(vec![n, m], data)?;
        Ok(self.push(v, Op::Transpose(x), self.needs(&[x])))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> AdResult<NodeId> {
        let v = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(x), self.needs(&[x])))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> AdResult<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()).into());
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::IndexOutOfRange { op: "concat", index: axis, len: first.len() }.into());
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().zip(first.iter()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first.clone(),
                    right: s.to_vec(),
                }
                .into());
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let s_axis = self.shape(p)[axis];
            let pv = self.value(p).data();
            for o in 0..outer {
                let src = &pv[o * s_axis * inner..(o + 1) * s_axis * inner];
                let dst = &mut data[o * out_stride + offset * inner..o * out_stride + (offset + s_axis) * inner];
                dst.copy_from_slice(src);
            }
            offset += s_axis;
        }
        let v = Tensor::new(out_shape, data)?;
        let needs = self.needs(parts);
        Ok(self.push(v, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> AdResult<NodeId> {
        let shape = self.shape(x).to_vec();
        let (outer, mid, inner) = slice_bounds(&shape, axis, start, len, "slice")?;
        let xv = self.value(x).data();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &xv[o * mid * inner + start * inner..o * mid * inner + (start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, self.needs(&[x])))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.needs(&[x]))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll(x), self.needs(&[x]))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), self.needs(&[x]))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x), self.needs(&[x]))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::sqrt);
        self.push(v, Op::Sqrt(x), self.needs(&[x]))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_scalar);
        self.push(v, Op::Gelu(x), self.needs(&[x]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push(v, Op::Relu(x), self.needs(&[x]))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(v, Op::Sigmoid(x), self.needs(&[x]))
    }

    /// Normalize the last axis to zero mean, unit variance. No affine part;
    /// compose with [`Tape::mul_row`] / [`Tape::add_row`] for gamma/beta.
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::LayerNorm { x, eps }, self.needs(&[x]))
    }

    /// Row-wise softmax of x/tau over the last axis, max-subtracted.
    pub fn softmax_t(&mut self, x: NodeId, tau: f64) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(x));
        let data = softmax_rows(self.value(x).data(), rows, cols, tau);
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::SoftmaxT { x, tau }, self.needs(&[x]))
    }

    /// Row-wise log-softmax of x/tau over the last axis.
    pub fn log_softmax_t(&mut self, x: NodeId, tau: f64) -> NodeId {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| ((v - m) / tau).exp()).sum::<f64>().ln();
            for c in 0..cols {
                data[r * cols + c] = (row[c] - m) / tau - lse;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(v, Op::LogSoftmaxT { x, tau }, self.needs(&[x]))
    }

    /// Mean over rows of the cross-entropy between soft target rows and
    /// softmax(logits/tau). One-hot targets at tau=1 give the standard CE.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId, tau: f64) -> AdResult<NodeId> {
        if self.shape(logits) != self.shape(targets) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: self.shape(targets).to_vec(),
            }
            .into());
        }
        let (rows, cols) = rows_cols(self.shape(logits));
        let lv = self.value(logits).data();
        let tv = self.value(targets).data();
        let mut total = 0.0;
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let trow = &tv[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| ((v - m) / tau).exp()).sum::<f64>().ln();
            for c in 0..cols {
                total -= trow[c] * ((row[c] - m) / tau - lse);
            }
        }
        let v = Tensor::scalar(total / rows as f64);
        let needs = self.needs(&[logits, targets]);
        Ok(self.push(v, Op::CrossEntropy { logits, targets, tau }, needs))
    }

    /// Inverted dropout: kept entries scale by 1/(1-p). The mask is drawn
    /// from the caller's stream so a step replays exactly on resume.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut ChaCha8Rng) -> AdResult<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::BadDropout(p));
        }
        if p == 0.0 {
            return Ok(self.mul_const(x, 1.0));
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<bool> = (0..self.value(x).len()).map(|_| rng.gen::<f64>() >= p).collect();
        let xv = self.value(x).data();
        let data: Vec<f64> = xv
            .iter()
            .zip(mask.iter())
            .map(|(&v, &keep)| if keep { v * scale } else { 0.0 })
            .collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { x, scale, mask }, self.needs(&[x])))
    }

    /// Select rows of a [rows, d] table. [`GATHER_ZERO_ROW`] ids produce a
    /// zero row and route no gradient. Backward scatter-adds, so repeated
    /// ids accumulate (this is the embedding-lookup backward rule).
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> AdResult<NodeId> {
        let (rows, cols) = self.value(x).dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no ids".into()).into());
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; ids.len() * cols];
        for (i, &id) in ids.iter().enumerate() {
            if id == GATHER_ZERO_ROW {
                continue;
            }
            if id >= rows {
                return Err(AutodiffError::BadGatherId { id, rows });
            }
            data[i * cols..(i + 1) * cols].copy_from_slice(&xv[id * cols..(id + 1) * cols]);
        }
        let v = Tensor::new(vec![ids.len(), cols], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(v, Op::GatherRows { x, ids: ids.to_vec() }, needs))
    }

    /// Row-wise cosine similarity of two [n, d] tensors, output shape [n].
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            }
            .into());
        }
        let (rows, cols) = rows_cols(self.shape(a));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let ar = &av[r * cols..(r + 1) * cols];
            let br = &bv[r * cols..(r + 1) * cols];
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for c in 0..cols {
                dot += ar[c] * br[c];
                na += ar[c] * ar[c];
                nb += br[c] * br[c];
            }
            if na == 0.0 || nb == 0.0 {
                return Err(AutodiffError::ZeroNormRow(r));
            }
            data[r] = dot / (na.sqrt() * nb.sqrt());
        }
        let v = Tensor::new(vec![rows], data)?;
        Ok(self.push(v, Op::CosineSim(a, b), self.needs(&[a, b])))
    }

    /// Mean absolute difference, scalar output.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "l1_mean",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            }
            .into());
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len() as f64;
        let s: f64 = av.iter().zip(bv.iter()).map(|(&x, &y)| (x - y).abs()).sum();
        let v = Tensor::scalar(s / n);
        Ok(self.push(v, Op::L1Mean(a, b), self.needs(&[a, b])))
    }

    /// Scale every row of a [n, d] tensor to unit L2 norm. Zero rows are
    /// rejected (they have no well-defined direction).
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> AdResult<NodeId> {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(AutodiffError::ZeroNormRow(r));
            }
            for c in 0..cols {
                data[r * cols + c] = row[c] / norm;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(v, Op::L2NormalizeRows(x), self.needs(&[x])))
    }

    /// Divide a tensor by a 1-element node (used for learnable temperature).
    pub fn div_by_scalar(&mut self, x: NodeId, s: NodeId) -> AdResult<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::RankMismatch {
                op: "div_by_scalar",
                expected: "a 1-element divisor",
                got: self.shape(s).to_vec(),
            }
            .into());
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|v| v / sv);
        Ok(self.push(v, Op::DivByScalar { x, s }, self.needs(&[x, s])))
    }

    /// Trilinear resampling of per-cell channel rows from `in_grid` to
    /// `out_grid` (x-fastest layout on both sides).
    pub fn resample3d(
        &mut self,
        x: NodeId,
        in_grid: [usize; 3],
        out_grid: [usize; 3],
    ) -> AdResult<NodeId> {
        let (rows, cols) = self.value(x).dims2("resample3d")?;
        let cells: usize = in_grid.iter().product();
        if rows != cells {
            return Err(TensorError::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("resample3d input rows {rows} != grid cells {cells}"),
            }
            .into());
        }
        if out_grid.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape {
                shape: out_grid.to_vec(),
                reason: "resample3d output grid extents must be >= 1".into(),
            }
            .into());
        }
        let data = resample3d(self.value(x).data(), in_grid, out_grid, cols);
        let out_cells: usize = out_grid.iter().product();
        let v = Tensor::new(vec![out_cells, cols], data)?;
        let needs = self.needs(&[x]);
        Ok(self.push(v, Op::Resample3D { x, in_grid, out_grid }, needs))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// reachable node that requires them.
    pub fn backward(&self, loss: NodeId) -> AdResult<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut ones = Tensor::full(self.shape(loss), 1.0);
        ones.round_to_mode(self.mode);
        grads[loss.index()] = Some(ones);
        let mut parents = Vec::with_capacity(4);
        for i in (0..=loss.index()).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            g.round_to_mode(self.mode);
            self.nodes[i].op.parents(&mut parents);
            if parents.is_empty() {
                grads[i] = Some(g);
                continue;
            }
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Keep only leaf/param gradients plus everything else computed; callers
        // address by NodeId so retaining interior grads is harmless.
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        if !self.nodes[id.index()].requires_grad {
            return;
        }
        match &mut grads[id.index()] {
            Some(g) => g.axpy(1.0, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gv = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b);
                let av = self.value(*a);
                self.accum(grads, *a, g.zip_map(bv, "mul", |x, y| x * y).expect("shape"));
                self.accum(grads, *b, g.zip_map(av, "mul", |x, y| x * y).expect("shape"));
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = gv.iter().zip(bv.iter()).map(|(&gi, &bi)| gi / bi).collect();
                let gb: Vec<f64> = gv
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&gi, (&ai, &bi))| -gi * ai / (bi * bi))
                    .collect();
                let shape = self.shape(*a).to_vec();
                self.accum(grads, *a, Tensor::new(shape.clone(), ga).expect("shape"));
                self.accum(grads, *b, Tensor::new(shape, gb).expect("shape"));
            }
            Op::AddRow(x, row) => {
                self.accum(grads, *x, g.clone());
                let (rows, cols) = rows_cols(self.shape(*x));
                let mut rg = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        rg[c] += gv[r * cols + c];
                    }
                }
                let shape = self.shape(*row).to_vec();
                self.accum(grads, *row, Tensor::new(shape, rg).expect("shape"));
            }
            Op::MulRow(x, row) => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let xv = self.value(*x).data();
                let rv = self.value(*row).data();
                let mut gx = vec![0.0; xv.len()];
                let mut gr = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = gv[r * cols + c] * rv[c];
                        gr[c] += gv[r * cols + c] * xv[r * cols + c];
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
                let shape = self.shape(*row).to_vec();
                self.accum(grads, *row, Tensor::new(shape, gr).expect("shape"));
            }
            Op::MulConst(x, c) => {
                self.accum(grads, *x, g.map(|v| v * c));
            }
            Op::AddConst(x) => {
                self.accum(grads, *x, g.clone());
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").expect("checked");
                let n = self.shape(*b)[1];
                let ga = matmul_transb(gv, self.value(*b).data(), m, n, k);
                let gb = matmul_transa(self.value(*a).data(), gv, m, k, n);
                self.accum(grads, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                self.accum(grads, *b, Tensor::new(vec![k, n], gb).expect("shape"));
            }
            Op::Transpose(x) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let gx = transpose2d(gv, n, m);
                self.accum(grads, *x, Tensor::new(vec![m, n], gx).expect("shape"));
            }
            Op::Reshape(x) => {
                let gx = Tensor::new(self.shape(*x).to_vec(), gv.to_vec()).expect("same len");
                self.accum(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let s_axis = self.shape(p)[*axis];
                    let mut gp = vec![0.0; self.value(p).len()];
                    for o in 0..outer {
                        let src = &gv[o * out_stride + offset * inner..o * out_stride + (offset + s_axis) * inner];
                        gp[o * s_axis * inner..(o + 1) * s_axis * inner].copy_from_slice(src);
                    }
                    offset += s_axis;
                    self.accum(grads, p, Tensor::new(self.shape(p).to_vec(), gp).expect("shape"));
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let out_shape = node.value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mid = in_shape[*axis];
                let len = out_shape[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = &mut gx[o * mid * inner + start * inner..o * mid * inner + (start + len) * inner];
                    dst.copy_from_slice(&gv[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(grads, *x, Tensor::new(in_shape.to_vec(), gx).expect("shape"));
            }
            Op::SumAll(x) => {
                let gx = Tensor::full(self.shape(*x), gv[0]);
                self.accum(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len() as f64;
                let gx = Tensor::full(self.shape(*x), gv[0] / n);
                self.accum(grads, *x, gx);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let gx: Vec<f64> = gv.iter().zip(y.iter()).map(|(&gi, &yi)| gi * yi).collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = gv.iter().zip(xv.iter()).map(|(&gi, &xi)| gi / xi).collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::Sqrt(x) => {
                let y = node.value.data();
                let gx: Vec<f64> = gv.iter().zip(y.iter()).map(|(&gi, &yi)| gi / (2.0 * yi)).collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = gv
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gi, &xi)| gi * gelu_grad_scalar(xi))
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = gv
                    .iter()
                    .zip(xv.iter())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx: Vec<f64> = gv
                    .iter()
                    .zip(y.iter())
                    .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::LayerNorm { x, eps } => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let xv = self.value(*x).data();
                let y = node.value.data();
                let mut gx = vec![0.0; xv.len()];
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gv[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / cols as f64;
                    let gy_mean = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::SoftmaxT { x, tau } => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gv[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = yr[c] * (gr[c] - dot) / tau;
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::LogSoftmaxT { x, tau } => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let xv = self.value(*x).data();
                let sm = softmax_rows(xv, rows, cols, *tau);
                let mut gx = vec![0.0; xv.len()];
                for r in 0..rows {
                    let gr = &gv[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - sm[r * cols + c] * gsum) / tau;
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::CrossEntropy { logits, targets, tau } => {
                let (rows, cols) = rows_cols(self.shape(*logits));
                let lv = self.value(*logits).data();
                let tv = self.value(*targets).data();
                let up = gv[0] / rows as f64;
                let sm = softmax_rows(lv, rows, cols, *tau);
                if self.nodes[logits.index()].requires_grad {
                    let mut gl = vec![0.0; lv.len()];
                    for r in 0..rows {
                        let tsum: f64 = tv[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            gl[r * cols + c] = up * (tsum * sm[r * cols + c] - tv[r * cols + c]) / tau;
                        }
                    }
                    self.accum(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), gl).expect("shape"));
                }
                if self.nodes[targets.index()].requires_grad {
                    let mut gt = vec![0.0; tv.len()];
                    for r in 0..rows {
                        let row = &lv[r * cols..(r + 1) * cols];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = row.iter().map(|&v| ((v - m) / tau).exp()).sum::<f64>().ln();
                        for c in 0..cols {
                            gt[r * cols + c] = -up * ((row[c] - m) / tau - lse);
                        }
                    }
                    self.accum(grads, *targets, Tensor::new(self.shape(*targets).to_vec(), gt).expect("shape"));
                }
            }
            Op::Dropout { x, scale, mask } => {
                let gx: Vec<f64> = gv
                    .iter()
                    .zip(mask.iter())
                    .map(|(&gi, &keep)| if keep { gi * scale } else { 0.0 })
                    .collect();
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::GatherRows { x, ids } => {
                let (_, cols) = self.value(*x).dims2("gather_rows").expect("checked");
                let mut gx = vec![0.0; self.value(*x).len()];
                for (i, &id) in ids.iter().enumerate() {
                    if id == GATHER_ZERO_ROW {
                        continue;
                    }
                    for c in 0..cols {
                        gx[id * cols + c] += gv[i * cols + c];
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::CosineSim(a, b) => {
                let (rows, cols) = rows_cols(self.shape(*a));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let y = node.value.data();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for r in 0..rows {
                    let ar = &av[r * cols..(r + 1) * cols];
                    let br = &bv[r * cols..(r + 1) * cols];
                    let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let cosv = y[r];
                    let gi = gv[r];
                    for c in 0..cols {
                        ga[r * cols + c] = gi * (br[c] / (na * nb) - cosv * ar[c] / (na * na));
                        gb[r * cols + c] = gi * (ar[c] / (na * nb) - cosv * br[c] / (nb * nb));
                    }
                }
                self.accum(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga).expect("shape"));
                self.accum(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb).expect("shape"));
            }
            Op::L1Mean(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = av.len() as f64;
                let up = gv[0] / n;
                let ga: Vec<f64> = av
                    .iter()
                    .zip(bv.iter())
                    .map(|(&x, &y)| up * (x - y).signum() * if x == y { 0.0 } else { 1.0 })
                    .collect();
                let gb: Vec<f64> = ga.iter().map(|&v| -v).collect();
                self.accum(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga).expect("shape"));
                self.accum(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb).expect("shape"));
            }
            Op::Minimum(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = gv
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&gi, (&x, &y))| if x <= y { gi } else { 0.0 })
                    .collect();
                let gb: Vec<f64> = gv
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&gi, (&x, &y))| if x > y { gi } else { 0.0 })
                    .collect();
                self.accum(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga).expect("shape"));
                self.accum(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb).expect("shape"));
            }
            Op::Maximum(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga: Vec<f64> = gv
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&gi, (&x, &y))| if x >= y { gi } else { 0.0 })
                    .collect();
                let gb: Vec<f64> = gv
                    .iter()
                    .zip(av.iter().zip(bv.iter()))
                    .map(|(&gi, (&x, &y))| if x < y { gi } else { 0.0 })
                    .collect();
                self.accum(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga).expect("shape"));
                self.accum(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb).expect("shape"));
            }
            Op::L2NormalizeRows(x) => {
                let (rows, cols) = rows_cols(self.shape(*x));
                let xv = self.value(*x).data();
                let y = node.value.data();
                let mut gx = vec![0.0; xv.len()];
                for r in 0..rows {
                    let xr = &xv[r * cols..(r + 1) * cols];
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gv[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - dot * yr[c]) / norm;
                    }
                }
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
            Op::DivByScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.nodes[x.index()].requires_grad {
                    self.accum(grads, *x, g.map(|v| v / sv));
                }
                if self.nodes[s.index()].requires_grad {
                    let xv = self.value(*x).data();
                    let gs: f64 = gv.iter().zip(xv.iter()).map(|(&gi, &xi)| -gi * xi / (sv * sv)).sum();
                    self.accum(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![gs]).expect("shape"));
                }
            }
            Op::Resample3D { x, in_grid, out_grid } => {
                let cols = self.shape(*x)[1];
                let gx = resample3d_adjoint(gv, *in_grid, *out_grid, cols);
                self.accum(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx).expect("shape"));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn scalar_param(t: &mut Tape, v: f64) -> NodeId {
        t.param(Tensor::scalar(v))
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new(FloatMode::F64);
        let x = scalar_param(&mut t, 3.0);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new(FloatMode::F64);
        let x = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax_t(x, 1.0);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_identity() {
        let mut t = Tape::new(FloatMode::F64);
        let v = t.constant(Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let c = t.cosine_sim(v, v).unwrap();
        assert!((t.value(c).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let mut t = Tape::new(FloatMode::F64);
        let a = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.cosine_sim(a, b), Err(AutodiffError::ZeroNormRow(0))));
    }

    #[test]
    fn layer_norm_hand_check() {
        // [1,2,3]: mean 2, population var 2/3, sd = sqrt(2/3).
        let mut t = Tape::new(FloatMode::F64);
        let x = t.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = t.layer_norm(x, 0.0);
        let sd = (2.0f64 / 3.0).sqrt();
        let out = t.value(y).data();
        for (o, e) in out.iter().zip([-1.0 / sd, 0.0, 1.0 / sd]) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
        let mean = out.iter().sum::<f64>() / 3.0;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_gradient() {
        // Uniform logits vs one-hot target: grad = (1/K - onehot) per logit.
        let k = 4;
        let mut t = Tape::new(FloatMode::F64);
        let logits = t.param(Tensor::new(vec![1, k], vec![0.7; k]).unwrap());
        let mut onehot = vec![0.0; k];
        onehot[2] = 1.0;
        let target = t.constant(Tensor::new(vec![1, k], onehot).unwrap());
        let loss = t.cross_entropy(logits, target, 1.0).unwrap();
        let g = t.backward(loss).unwrap();
        let gl = g.get(logits).unwrap().data();
        for (i, &gi) in gl.iter().enumerate() {
            let expect = 1.0 / k as f64 - if i == 2 { 1.0 } else { 0.0 };
            assert!((gi - expect).abs() < 1e-12, "i={i} gi={gi} expect={expect}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new(FloatMode::F64);
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new(FloatMode::F64);
        let x = t.param(Tensor::scalar(2.0));
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 5.0);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn unreachable_param_reads_as_zeros() {
        let mut t = Tape::new(FloatMode::F64);
        let x = t.param(Tensor::scalar(2.0));
        let unused = t.param(Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, &[2, 2]).data(), &[0.0; 4]);
    }

    #[test]
    fn independent_subgraph_sum_matches_separate_backwards() {
        let build = |t: &mut Tape| {
            let x = t.param(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
            let e = t.exp(x);
            let s = t.sum_all(e);
            (x, s)
        };
        let build2 = |t: &mut Tape| {
            let y = t.param(Tensor::new(vec![2], vec![0.25, 2.0]).unwrap());
            let sq = t.mul(y, y).unwrap();
            let s = t.sum_all(sq);
            (y, s)
        };
        // Joint graph.
        let mut t = Tape::new(FloatMode::F64);
        let (x, lx) = build(&mut t);
        let (y, ly) = build2(&mut t);
        let total = t.add(lx, ly).unwrap();
        let g = t.backward(total).unwrap();
        // Separate graphs.
        let mut t1 = Tape::new(FloatMode::F64);
        let (x1, l1) = build(&mut t1);
        let g1 = t1.backward(l1).unwrap();
        let mut t2 = Tape::new(FloatMode::F64);
        let (y2, l2) = build2(&mut t2);
        let g2 = t2.backward(l2).unwrap();
        assert_eq!(g.get(x).unwrap().data(), g1.get(x1).unwrap().data());
        assert_eq!(g.get(y).unwrap().data(), g2.get(y2).unwrap().data());
    }

    #[test]
    fn dropout_replays_with_same_stream() {
        let x_data = Tensor::new(vec![4, 8], (0..32).map(|i| i as f64).collect()).unwrap();
        let run = || {
            let mut t = Tape::new(FloatMode::F64);
            let x = t.constant(x_data.clone());
            let mut rng = stream_rng(9, "dropout", &[3, 0]);
            let d = t.dropout(x, 0.5, &mut rng).unwrap();
            t.value(d).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_zero_row_sentinel() {
        let mut t = Tape::new(FloatMode::F64);
        let table = t.param(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = t.gather_rows(table, &[2, GATHER_ZERO_ROW, 0, 0]).unwrap();
        assert_eq!(t.value(g).data(), &[5.0, 6.0, 0.0, 0.0, 1.0, 2.0, 1.0, 2.0]);
        let s = t.sum_all(g);
        let grads = t.backward(s).unwrap();
        // Row 0 hit twice, row 1 never, row 2 once.
        assert_eq!(grads.get(table).unwrap().data(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn slice_concat_roundtrip_gradient() {
        let mut t = Tape::new(FloatMode::F64);
        let x = t.param(Tensor::new(vec![2, 4], (0..8).map(|i| i as f64).collect()).unwrap());
        let a = t.slice(x, 1, 0, 2).unwrap();
        let b = t.slice(x, 1, 2, 2).unwrap();
        let back = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(back).data(), t.value(x).data());
        let doubled = t.mul_const(back, 2.0);
        let s = t.sum_all(doubled);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 8]);
    }

    #[test]
    fn f32_mode_values_are_f32_representable() {
        let mut t = Tape::new(FloatMode::F32);
        let x = t.param(Tensor::new(vec![2], vec![0.1, 0.7]).unwrap());
        let e = t.exp(x);
        let s = t.sum_all(e);
        for &v in t.value(e).data() {
            assert_eq!(v, v as f32 as f64);
        }
        let g = t.backward(s).unwrap();
        for &v in g.get(x).unwrap().data() {
            assert_eq!(v, v as f32 as f64);
        }
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut t = Tape::new(FloatMode::F64);
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }
}
