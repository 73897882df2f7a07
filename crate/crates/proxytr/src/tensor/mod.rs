//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of topologically ordered nodes: every operation
//! appends one node holding the forward value and a record of its inputs.
//! [`Graph::backward`] walks the tape in reverse, accumulating gradients
//! into every node that requires them. Graphs are rebuilt per forward pass;
//! learnable parameters live outside the tape in a [`ParamStore`] and enter
//! each graph as leaf nodes.
//!
//! Evaluation order is fixed by construction, so repeated forward passes
//! over identical inputs are bit-identical. A graph is confined to a single
//! thread; independent graphs may run concurrently.

mod params;

pub use params::{ParamId, ParamStore};

use crate::error::{Error, Result};
use std::fmt;

/// Checkpoint dtype tags. Values match the on-disk container encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` (training/inference)
/// and `f64` (gradient-check mode).
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
{
    const DTYPE: Dtype;
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maximum(self, other: f32) -> f32 {
        f32::max(self, other)
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maximum(self, other: f64) -> f64 {
        f64::max(self, other)
    }
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op<E> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Binary {
        kind: BinKind,
        a: TensorId,
        b: TensorId,
    },
    Relu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Sqrt {
        a: TensorId,
    },
    Scale {
        a: TensorId,
        c: E,
    },
    AddConst {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: TensorId,
        axis: Option<usize>,
        /// For max: flat input index backing each output element.
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    GatherRows {
        a: TensorId,
        idx: Vec<usize>,
    },
    SliceCols {
        a: TensorId,
        start: usize,
    },
    Transpose {
        a: TensorId,
    },
    Reshape {
        a: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: E,
    },
}

/// One tape entry: the forward value plus what produced it.
struct Node<E> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// Reverse-mode tape. See module docs.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    grad_enabled: bool,
    /// Parameter leaves inserted via [`Graph::param`], in insertion order.
    param_leaves: Vec<(ParamId, TensorId)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Output shape of a trailing-rule broadcast, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

fn pad_left(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// Map every flat index of `out_shape` to a flat index of `src_shape`
/// (src broadcast to out under the trailing rule).
fn broadcast_index_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let padded = pad_left(src_shape, ndim);
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut strides = vec![0usize; ndim];
    let mut s = 1;
    for d in (0..ndim).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }
    for flat in 0..total {
        let mut rem = flat;
        let mut src = 0;
        for d in (0..ndim).rev() {
            let c = rem % out_shape[d];
            rem /= out_shape[d];
            src += c * strides[d];
        }
        map.push(src);
    }
    map
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            param_leaves: Vec::new(),
        }
    }

    /// Graph that records values only; backward is unavailable and ops hold
    /// no input references. Used for inference.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            param_leaves: Vec::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = TensorId(self.nodes.len());
        let (requires_grad, op) = if self.grad_enabled {
            (requires_grad, op)
        } else {
            (false, Op::Leaf)
        };
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    /// New leaf tensor. Shape extents must be positive and match the data length.
    pub fn tensor(&mut self, data: Vec<E>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!("tensor shape must have positive extents, got {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Domain(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    /// Leaf with `requires_grad = false`.
    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> Result<TensorId> {
        self.tensor(data, shape, false)
    }

    /// Insert a parameter as a leaf node and remember the association for
    /// [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> TensorId {
        let entry = store.entry(id);
        let t = self.push(entry.shape.clone(), entry.data.clone(), true, Op::Leaf);
        self.param_leaves.push((id, t));
        t
    }

    pub(crate) fn param_leaves(&self) -> &[(ParamId, TensorId)] {
        &self.param_leaves
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorId) -> &[E] {
        &self.nodes[t.0].data
    }

    /// Gradient accumulated by [`Graph::backward`], if any.
    pub fn grad(&self, t: TensorId) -> Option<&[E]> {
        self.nodes[t.0].grad.as_deref()
    }

    fn requires(&self, t: TensorId) -> bool {
        self.nodes[t.0].requires_grad
    }

    // ---- forward operations ------------------------------------------------

    /// 2D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul { a, b }))
    }

    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or(Error::ShapeMismatch {
            op: match kind {
                BinKind::Add => "add",
                BinKind::Sub => "sub",
                BinKind::Mul => "mul",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let total = numel(&out_shape);
        let mut data = Vec::with_capacity(total);
        let apply = |x: E, y: E| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        if sa == sb {
            let (da, db) = (self.value(a), self.value(b));
            for i in 0..total {
                data.push(apply(da[i], db[i]));
            }
        } else {
            let map_a = broadcast_index_map(&sa, &out_shape);
            let map_b = broadcast_index_map(&sb, &out_shape);
            let (da, db) = (self.value(a), self.value(b));
            for i in 0..total {
                data.push(apply(da[map_a[i]], db[map_b[i]]));
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out_shape, data, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self.value(a).iter().map(|&x| x.maximum(E::ZERO)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(shape, data, rg, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self
            .value(a)
            .iter()
            .map(|&x| E::ONE / (E::ONE + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(shape, data, rg, Op::Sigmoid { a })
    }

    /// Elementwise square root. The caller must keep inputs strictly positive
    /// (add a small constant first) or the backward pass divides by zero.
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let data: Vec<E> = self.value(a).iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(shape, data, rg, Op::Sqrt { a })
    }

    pub fn scale(&mut self, a: TensorId, c: E) -> TensorId {
        let data: Vec<E> = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(shape, data, rg, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: TensorId, c: E) -> TensorId {
        let data: Vec<E> = self.value(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(shape, data, rg, Op::AddConst { a })
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Domain(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a);
        let mut data = vec![E::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = src[at(0)];
                for j in 1..len {
                    max = max.maximum(src[at(j)]);
                }
                let mut sum = E::ZERO;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Softmax { a, axis }))
    }

    fn reduce(&mut self, kind: ReduceKind, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if let Some(ax) = axis {
            if ax >= shape.len() {
                return Err(Error::Domain(format!(
                    "reduce axis {ax} out of range for shape {shape:?}"
                )));
            }
        }
        let src = self.value(a);
        if src.is_empty() {
            return Err(Error::Domain("reduce over empty tensor".into()));
        }
        let (out_shape, outer, len, inner) = match axis {
            None => (vec![1], 1usize, src.len(), 1usize),
            Some(ax) => {
                let (o, l, i) = axis_split(&shape, ax);
                let mut os: Vec<usize> = shape.clone();
                os.remove(ax);
                if os.is_empty() {
                    os.push(1);
                }
                (os, o, l, i)
            }
        };
        if len == 0 {
            return Err(Error::Domain("empty reduction axis".into()));
        }
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut acc = E::ZERO;
                        for j in 0..len {
                            acc += src[at(j)];
                        }
                        if kind == ReduceKind::Mean {
                            acc = acc / E::from_f64(len as f64);
                        }
                        data.push(acc);
                    }
                    ReduceKind::Max => {
                        // Ties resolve to the lowest flat index.
                        let mut best = src[at(0)];
                        let mut best_j = 0usize;
                        for j in 1..len {
                            if src[at(j)] > best {
                                best = src[at(j)];
                                best_j = j;
                            }
                        }
                        data.push(best);
                        argmax.push(at(best_j));
                    }
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(out_shape, data, rg, Op::Reduce { kind, a, axis, argmax }))
    }

    pub fn sum(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn max(&mut self, a: TensorId, axis: Option<usize>) -> Result<TensorId> {
        self.reduce(ReduceKind::Max, a, axis)
    }

    /// Concatenate 2D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Domain(format!("concat axis {axis} not supported")));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::Domain("concat requires 2D tensors".into()));
        }
        let fixed = 1 - axis;
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[fixed] != first[fixed] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (rows, cols) = (out_shape[0], out_shape[1]);
        let mut data = vec![E::ZERO; rows * cols];
        if axis == 0 {
            let mut row0 = 0usize;
            for &p in parts {
                let n = self.shape(p)[0];
                let src = self.value(p);
                data[row0 * cols..(row0 + n) * cols].copy_from_slice(src);
                row0 += n;
            }
        } else {
            let mut col0 = 0usize;
            for &p in parts {
                let w = self.shape(p)[1];
                let src = self.value(p);
                for r in 0..rows {
                    data[r * cols + col0..r * cols + col0 + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                col0 += w;
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out_shape,
            data,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Select rows of a 2D tensor by index; duplicates allowed. Backward
    /// scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Domain("gather_rows requires a 2D tensor".into()));
        }
        if idx.is_empty() {
            return Err(Error::Domain("gather_rows with empty index set".into()));
        }
        let (rows, cols) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Domain(format!("gather_rows index {bad} out of range 0..{rows}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.requires(a);
        Ok(self.push(
            vec![idx.len(), cols],
            data,
            rg,
            Op::GatherRows { a, idx: idx.to_vec() },
        ))
    }

    /// Columns `[start, start+len)` of a 2D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::Domain(format!(
                "slice_cols [{start}, {}) invalid for shape {s:?}",
                start + len
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![rows, len], data, rg, Op::SliceCols { a, start }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Domain("transpose requires a 2D tensor".into()));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a);
        let mut data = vec![E::ZERO; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![cols, rows], data, rg, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel(&shape) != self.value(a).len() {
            return Err(Error::Domain(format!(
                "reshape to {shape:?} invalid for {} elements",
                self.value(a).len()
            )));
        }
        let data = self.value(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Reshape { a }))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: E) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = src.len() / d;
        let mut data = vec![E::ZERO; src.len()];
        let inv_d = E::ONE / E::from_f64(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_d;
            let mut var = E::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var = var * inv_d;
            let inv_std = E::ONE / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            rg,
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-accumulate gradients of a scalar `loss` into every node with
    /// `requires_grad`. Leaf gradients accumulate across calls; interior
    /// gradients are reset each call.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Interior grads restart at zero; leaves keep accumulating.
        for node in self.nodes.iter_mut() {
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    if node.grad.is_none() {
                        node.grad = Some(vec![E::ZERO; node.data.len()]);
                    }
                }
                _ => node.grad = Some(vec![E::ZERO; node.data.len()]),
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] += E::ONE;
        } else {
            return Ok(()); // loss does not depend on any tracked tensor
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            self.step_backward(i)?;
        }
        Ok(())
    }

    fn add_to_grad(&mut self, t: TensorId, contrib: &[E]) {
        if !self.nodes[t.0].requires_grad {
            return;
        }
        let g = self.nodes[t.0]
            .grad
            .as_mut()
            .expect("grad buffer allocated before propagation");
        for (a, &b) in g.iter_mut().zip(contrib) {
            *a += b;
        }
    }

    fn step_backward(&mut self, i: usize) -> Result<()> {
        let grad = self.nodes[i].grad.as_ref().unwrap().clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.requires(a) {
                    // dA = G * B^T
                    let bd = self.value(b);
                    let mut da = vec![E::ZERO; m * k];
                    for r in 0..m {
                        for j in 0..n {
                            let g = grad[r * n + j];
                            for p in 0..k {
                                da[r * k + p] += g * bd[p * n + j];
                            }
                        }
                    }
                    self.add_to_grad(a, &da);
                }
                if self.requires(b) {
                    // dB = A^T * G
                    let ad = self.value(a);
                    let mut db = vec![E::ZERO; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * grad[r * n + j];
                            }
                        }
                    }
                    self.add_to_grad(b, &db);
                }
            }
            Op::Binary { kind, a, b } => {
                let (kind, a, b) = (*kind, *a, *b);
                let out_shape = self.shape(TensorId(i)).to_vec();
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let da_full: Vec<E>;
                let db_full: Vec<E>;
                match kind {
                    BinKind::Add => {
                        da_full = grad.clone();
                        db_full = grad.clone();
                    }
                    BinKind::Sub => {
                        da_full = grad.clone();
                        db_full = grad.iter().map(|&g| -g).collect();
                    }
                    BinKind::Mul => {
                        let map_a = if sa == out_shape { None } else { Some(broadcast_index_map(&sa, &out_shape)) };
                        let map_b = if sb == out_shape { None } else { Some(broadcast_index_map(&sb, &out_shape)) };
                        let (va, vb) = (self.value(a), self.value(b));
                        da_full = grad
                            .iter()
                            .enumerate()
                            .map(|(j, &g)| g * vb[map_b.as_ref().map_or(j, |m| m[j])])
                            .collect();
                        db_full = grad
                            .iter()
                            .enumerate()
                            .map(|(j, &g)| g * va[map_a.as_ref().map_or(j, |m| m[j])])
                            .collect();
                    }
                }
                if self.requires(a) {
                    let da = reduce_to_shape(&da_full, &out_shape, &sa);
                    self.add_to_grad(a, &da);
                }
                if self.requires(b) {
                    let db = reduce_to_shape(&db_full, &out_shape, &sb);
                    self.add_to_grad(b, &db);
                }
            }
            Op::Relu { a } => {
                let a = *a;
                let dg: Vec<E> = grad
                    .iter()
                    .zip(self.value(a))
                    .map(|(&g, &x)| if x > E::ZERO { g } else { E::ZERO })
                    .collect();
                self.add_to_grad(a, &dg);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let dg: Vec<E> = grad
                    .iter()
                    .zip(self.value(TensorId(i)))
                    .map(|(&g, &y)| g * y * (E::ONE - y))
                    .collect();
                self.add_to_grad(a, &dg);
            }
            Op::Sqrt { a } => {
                let a = *a;
                let two = E::from_f64(2.0);
                let dg: Vec<E> = grad
                    .iter()
                    .zip(self.value(TensorId(i)))
                    .map(|(&g, &y)| g / (two * y))
                    .collect();
                self.add_to_grad(a, &dg);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let dg: Vec<E> = grad.iter().map(|&g| g * c).collect();
                self.add_to_grad(a, &dg);
            }
            Op::AddConst { a } => {
                let a = *a;
                self.add_to_grad(a, &grad);
            }
            Op::Softmax { a, axis } => {
                let (a, axis) = (*a, *axis);
                let shape = self.shape(TensorId(i)).to_vec();
                let (outer, len, inner) = axis_split(&shape, axis);
                let y = self.value(TensorId(i));
                let mut dg = vec![E::ZERO; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let mut dot = E::ZERO;
                        for j in 0..len {
                            dot += grad[at(j)] * y[at(j)];
                        }
                        for j in 0..len {
                            dg[at(j)] = y[at(j)] * (grad[at(j)] - dot);
                        }
                    }
                }
                self.add_to_grad(a, &dg);
            }
            Op::Reduce { kind, a, axis, argmax } => {
                let (kind, a, axis) = (*kind, *a, *axis);
                let argmax = argmax.clone();
                let in_shape = self.shape(a).to_vec();
                let in_len = numel(&in_shape);
                let mut dg = vec![E::ZERO; in_len];
                match kind {
                    ReduceKind::Max => {
                        for (out_flat, &src_flat) in argmax.iter().enumerate() {
                            dg[src_flat] += grad[out_flat];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let (outer, len, inner) = match axis {
                            None => (1usize, in_len, 1usize),
                            Some(ax) => axis_split(&in_shape, ax),
                        };
                        let scale = if kind == ReduceKind::Mean {
                            E::ONE / E::from_f64(len as f64)
                        } else {
                            E::ONE
                        };
                        for o in 0..outer {
                            for ii in 0..inner {
                                let g = grad[o * inner + ii] * scale;
                                for j in 0..len {
                                    dg[o * len * inner + j * inner + ii] += g;
                                }
                            }
                        }
                    }
                }
                self.add_to_grad(a, &dg);
            }
            Op::Concat { parts, axis } => {
                let (parts, axis) = (parts.clone(), *axis);
                let out_cols = self.shape(TensorId(i))[1];
                let mut offset = 0usize;
                for p in parts {
                    let s = self.shape(p).to_vec();
                    let (rows, cols) = (s[0], s[1]);
                    let mut dg = vec![E::ZERO; rows * cols];
                    if axis == 0 {
                        dg.copy_from_slice(&grad[offset * cols..(offset + rows) * cols]);
                        offset += rows;
                    } else {
                        let total_rows = self.shape(TensorId(i))[0];
                        for r in 0..total_rows {
                            dg[r * cols..(r + 1) * cols].copy_from_slice(
                                &grad[r * out_cols + offset..r * out_cols + offset + cols],
                            );
                        }
                        offset += cols;
                    }
                    self.add_to_grad(p, &dg);
                }
            }
            Op::GatherRows { a, idx } => {
                let (a, idx) = (*a, idx.clone());
                let s = self.shape(a).to_vec();
                let cols = s[1];
                let mut dg = vec![E::ZERO; s[0] * cols];
                for (r, &src_row) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dg[src_row * cols + c] += grad[r * cols + c];
                    }
                }
                self.add_to_grad(a, &dg);
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let s = self.shape(a).to_vec();
                let (rows, cols) = (s[0], s[1]);
                let len = self.shape(TensorId(i))[1];
                let mut dg = vec![E::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..len {
                        dg[r * cols + start + c] = grad[r * len + c];
                    }
                }
                self.add_to_grad(a, &dg);
            }
            Op::Transpose { a } => {
                let a = *a;
                let out_shape = self.shape(TensorId(i)).to_vec();
                let (rows, cols) = (out_shape[0], out_shape[1]);
                let mut dg = vec![E::ZERO; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dg[c * rows + r] = grad[r * cols + c];
                    }
                }
                self.add_to_grad(a, &dg);
            }
            Op::Reshape { a } => {
                let a = *a;
                self.add_to_grad(a, &grad);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = *self.shape(TensorId(i)).last().unwrap();
                let src = self.value(x);
                let gm = self.value(gamma);
                let rows = src.len() / d;
                let inv_d = E::ONE / E::from_f64(d as f64);
                let mut dx = vec![E::ZERO; src.len()];
                let mut dgamma = vec![E::ZERO; d];
                let mut dbeta = vec![E::ZERO; d];
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let g_row = &grad[r * d..(r + 1) * d];
                    let mut mean = E::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean * inv_d;
                    let mut var = E::ZERO;
                    for &v in row {
                        var += (v - mean) * (v - mean);
                    }
                    var = var * inv_d;
                    let inv_std = E::ONE / (var + eps).sqrt();
                    let mut dxhat_sum = E::ZERO;
                    let mut dxhat_dot = E::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = g_row[j] * gm[j];
                        dgamma[j] += g_row[j] * xhat;
                        dbeta[j] += g_row[j];
                        dxhat_sum += dxhat;
                        dxhat_dot += dxhat * xhat;
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = g_row[j] * gm[j];
                        dx[r * d + j] =
                            inv_std * inv_d * (E::from_f64(d as f64) * dxhat - dxhat_sum - xhat * dxhat_dot);
                    }
                }
                self.add_to_grad(x, &dx);
                self.add_to_grad(gamma, &dgamma);
                self.add_to_grad(beta, &dbeta);
            }
        }
        Ok(())
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Graph::new()
    }
}

/// `(outer, axis_len, inner)` split of a shape at `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += av * row[j];
            }
        }
    }
    c
}

/// Sum a gradient of `from_shape` down to `to_shape` (undo broadcasting).
fn reduce_to_shape<E: Element>(grad: &[E], from_shape: &[usize], to_shape: &[usize]) -> Vec<E> {
    if from_shape == to_shape {
        return grad.to_vec();
    }
    let map = broadcast_index_map(to_shape, from_shape);
    let mut out = vec![E::ZERO; numel(to_shape)];
    for (flat, &g) in grad.iter().enumerate() {
        out[map[flat]] += g;
    }
    out
}

#[cfg(test)]
mod tests;
