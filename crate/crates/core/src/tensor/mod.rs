//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a node in an acyclic compute graph. Ops record their
//! parents; `backward` replays the graph once in reverse topological order
//! and accumulates gradients into every visited node that requires them.
//! All arithmetic is 64-bit and single-threaded, so results are bitwise
//! reproducible run to run.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

mod grad_check;
pub use grad_check::grad_check;

/// GELU tanh-approximation constants.
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Epsilon inside the layer-norm variance sqrt. Small enough that the
/// normalized output variance stays within 1e-8 of 1 on unit-scale rows.
const LAYER_NORM_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// While alive, newly created tensors are plain leaves: no graph is
/// recorded. Used for inference, feature caching and finite differences.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = NO_GRAD.with(|f| f.replace(true));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        NO_GRAD.with(|f| f.set(prev));
    }
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|f| !f.get())
}

/// Provenance of a non-leaf node: the operation and its parents, plus
/// whatever forward-pass values the VJP needs.
enum Op {
    Leaf,
    Matmul {
        a: Tensor,
        b: Tensor,
    },
    Transpose {
        x: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Scale {
        x: Tensor,
        c: f64,
    },
    Gelu {
        x: Tensor,
    },
    Softmax {
        x: Tensor,
    },
    CausalSoftmax {
        x: Tensor,
    },
    LayerNorm {
        x: Tensor,
        gain: Tensor,
        bias: Tensor,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Tensor,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Slice {
        x: Tensor,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Tensor,
    },
    Mean {
        x: Tensor,
    },
    Sum {
        x: Tensor,
    },
    MeanRows {
        x: Tensor,
    },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Handle to a graph node. Cloning is cheap and shares the node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_node(shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        let record = requires_grad && grad_enabled();
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: record,
                op: if record { op } else { Op::Leaf },
            })),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("shape {:?} wants {} values, got {}", shape, numel_of(&shape), data.len()),
            });
        }
        Ok(Tensor::new_node(shape, data, Op::Leaf, false))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::new_node(shape, vec![0.0; n], Op::Leaf, false)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor::new_node(shape, vec![value; n], Op::Leaf, false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new_node(vec![], vec![value], Op::Leaf, false)
    }

    /// Mark a leaf as a trainable parameter. Grads then accumulate here.
    pub fn requires_grad(self, yes: bool) -> Tensor {
        {
            let mut inner = self.inner.borrow_mut();
            assert!(
                matches!(inner.op, Op::Leaf),
                "requires_grad may only be toggled on leaf tensors"
            );
            inner.requires_grad = yes;
        }
        self
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.inner.borrow().op, Op::Leaf)
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Copy of the forward value.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar {:?}", inner.shape);
        inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Scale the stored gradient in place (no-op when absent).
    pub fn scale_grad(&self, factor: f64) {
        if let Some(g) = self.inner.borrow_mut().grad.as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Overwrite the stored values. Only touch leaves between graph builds
    /// (optimizer updates, finite differences).
    pub fn set_data(&self, data: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data = data;
    }

    /// In-place view over the stored values, same caveats as `set_data`.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut inner = self.inner.borrow_mut();
        f(&mut inner.data)
    }

    /// A new leaf holding the same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::new_node(inner.shape.clone(), inner.data.clone(), Op::Leaf, false)
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn key(&self) -> *const RefCell<Inner> {
        Rc::as_ptr(&self.inner)
    }

    // ── Ops ─────────────────────────────────────────────────────────────

    /// 2-D matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (la, lb) = (self.inner.borrow(), rhs.inner.borrow());
        if la.shape.len() != 2 || lb.shape.len() != 2 || la.shape[1] != lb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: la.shape.clone(),
                rhs: lb.shape.clone(),
            });
        }
        let (m, k, n) = (la.shape[0], la.shape[1], lb.shape[1]);
        let out = matmul_data(&la.data, &lb.data, m, k, n);
        let req = la.requires_grad || lb.requires_grad;
        drop(la);
        drop(lb);
        Ok(Tensor::new_node(
            vec![m, n],
            out,
            Op::Matmul {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if inner.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", inner.shape),
            });
        }
        let (r, c) = (inner.shape[0], inner.shape[1]);
        let out = transpose_data(&inner.data, r, c);
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(vec![c, r], out, Op::Transpose { x: self.clone() }, req))
    }

    /// Elementwise add. The right side may have fewer axes; it is then
    /// broadcast over the leading axes of the left side (its shape must be
    /// a suffix of the left shape).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let (la, lb) = (self.inner.borrow(), rhs.inner.borrow());
        if !suffix_broadcastable(&la.shape, &lb.shape) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: la.shape.clone(),
                rhs: lb.shape.clone(),
            });
        }
        let bn = lb.data.len();
        let mut out = la.data.clone();
        for (chunk, _) in out.chunks_mut(bn).zip(0..) {
            for (o, b) in chunk.iter_mut().zip(lb.data.iter()) {
                *o += *b;
            }
        }
        let shape = la.shape.clone();
        let req = la.requires_grad || lb.requires_grad;
        drop(la);
        drop(lb);
        Ok(Tensor::new_node(
            shape,
            out,
            Op::Add {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// Elementwise subtract, shapes must match exactly.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let (la, lb) = (self.inner.borrow(), rhs.inner.borrow());
        if la.shape != lb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "sub",
                lhs: la.shape.clone(),
                rhs: lb.shape.clone(),
            });
        }
        let out: Vec<f64> = la.data.iter().zip(lb.data.iter()).map(|(a, b)| a - b).collect();
        let shape = la.shape.clone();
        let req = la.requires_grad || lb.requires_grad;
        drop(la);
        drop(lb);
        Ok(Tensor::new_node(
            shape,
            out,
            Op::Sub {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// Elementwise product, shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (la, lb) = (self.inner.borrow(), rhs.inner.borrow());
        if la.shape != lb.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: la.shape.clone(),
                rhs: lb.shape.clone(),
            });
        }
        let out: Vec<f64> = la.data.iter().zip(lb.data.iter()).map(|(a, b)| a * b).collect();
        let shape = la.shape.clone();
        let req = la.requires_grad || lb.requires_grad;
        drop(la);
        drop(lb);
        Ok(Tensor::new_node(
            shape,
            out,
            Op::Mul {
                a: self.clone(),
                b: rhs.clone(),
            },
            req,
        ))
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let out: Vec<f64> = inner.data.iter().map(|v| v * c).collect();
        let shape = inner.shape.clone();
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(shape, out, Op::Scale { x: self.clone(), c }, req))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let out: Vec<f64> = inner.data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = inner.shape.clone();
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(shape, out, Op::Gelu { x: self.clone() }, req))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if inner.shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: "rank-0 input".into(),
            });
        }
        let cols = *inner.shape.last().unwrap();
        let mut out = vec![0.0; inner.data.len()];
        for (orow, row) in out.chunks_mut(cols).zip(inner.data.chunks(cols)) {
            softmax_row(row, orow);
        }
        let shape = inner.shape.clone();
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(shape, out, Op::Softmax { x: self.clone() }, req))
    }

    /// Row-wise softmax on a square score matrix where row i only sees
    /// columns 0..=i. Excluded columns are exactly zero, which makes the
    /// causality contract bitwise rather than a numerical-underflow accident.
    pub fn causal_softmax(&self) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if inner.shape.len() != 2 || inner.shape[0] != inner.shape[1] {
            return Err(TensorError::Invalid {
                op: "causal_softmax",
                msg: format!("expected square matrix, got {:?}", inner.shape),
            });
        }
        let t = inner.shape[0];
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            let row = &inner.data[i * t..i * t + i + 1];
            softmax_row(row, &mut out[i * t..i * t + i + 1]);
        }
        let shape = inner.shape.clone();
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(shape, out, Op::CausalSoftmax { x: self.clone() }, req))
    }

    /// Layer norm over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let (gi, bi) = (gain.inner.borrow(), bias.inner.borrow());
        if inner.shape.is_empty() {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "rank-0 input".into(),
            });
        }
        let cols = *inner.shape.last().unwrap();
        if gi.shape != [cols] || bi.shape != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: inner.shape.clone(),
                rhs: gi.shape.clone(),
            });
        }
        let rows = inner.data.len() / cols;
        let mut normalized = vec![0.0; inner.data.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; inner.data.len()];
        for r in 0..rows {
            let row = &inner.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let nh = (row[c] - mean) * is;
                normalized[r * cols + c] = nh;
                out[r * cols + c] = nh * gi.data[c] + bi.data[c];
            }
        }
        let shape = inner.shape.clone();
        let req = inner.requires_grad || gi.requires_grad || bi.requires_grad;
        drop(inner);
        drop(gi);
        drop(bi);
        Ok(Tensor::new_node(
            shape,
            out,
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normalized,
                inv_std,
            },
            req,
        ))
    }

    /// Gather rows of a 2-D table: `table[indices[i], :]` stacked.
    pub fn gather(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let ti = table.inner.borrow();
        if ti.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("table must be rank 2, got {:?}", ti.shape),
            });
        }
        let (k, d) = (ti.shape[0], ti.shape[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= k {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: idx,
                    size: k,
                });
            }
            out.extend_from_slice(&ti.data[idx * d..(idx + 1) * d]);
        }
        let req = ti.requires_grad;
        drop(ti);
        Ok(Tensor::new_node(
            vec![indices.len(), d],
            out,
            Op::Gather {
                table: table.clone(),
                indices: indices.to_vec(),
            },
            req,
        ))
    }

    /// Concatenate along one axis. All other extents must match.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no tensors given".into(),
            });
        }
        let first_shape = parts[0].shape();
        if axis >= first_shape.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, first_shape),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first_shape.len()
                || s.iter()
                    .zip(first_shape.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first_shape.clone(),
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first_shape[..axis].iter().product();
        let inner_stride: usize = first_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for p in parts {
                let pi = p.inner.borrow();
                let pa = pi.shape[axis];
                let block = pa * inner_stride;
                out.extend_from_slice(&pi.data[o * block..(o + 1) * block]);
            }
        }
        let req = parts.iter().any(|p| p.inner.borrow().requires_grad);
        Ok(Tensor::new_node(
            out_shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        ))
    }

    /// Contiguous slice `start..start+len` along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if axis >= inner.shape.len() {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("axis {} out of range for {:?}", axis, inner.shape),
            });
        }
        if start + len > inner.shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                size: inner.shape[axis],
            });
        }
        let outer: usize = inner.shape[..axis].iter().product();
        let inner_stride: usize = inner.shape[axis + 1..].iter().product();
        let axis_len = inner.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner_stride);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner_stride;
            out.extend_from_slice(&inner.data[base..base + len * inner_stride]);
        }
        let mut shape = inner.shape.clone();
        shape[axis] = len;
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(
            shape,
            out,
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
            req,
        ))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if numel_of(&shape) != inner.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: inner.shape.clone(),
                rhs: shape,
            });
        }
        let out = inner.data.clone();
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(shape, out, Op::Reshape { x: self.clone() }, req))
    }

    /// Mean of all entries (scalar output).
    pub fn mean(&self) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if inner.data.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let v = inner.data.iter().sum::<f64>() / inner.data.len() as f64;
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(vec![], vec![v], Op::Mean { x: self.clone() }, req))
    }

    /// Sum of all entries (scalar output).
    pub fn sum(&self) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let v = inner.data.iter().sum::<f64>();
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(vec![], vec![v], Op::Sum { x: self.clone() }, req))
    }

    /// Mean over axis 0 of a 2-D tensor, keeping a leading 1 axis.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if inner.shape.len() != 2 || inner.shape[0] == 0 {
            return Err(TensorError::Invalid {
                op: "mean_rows",
                msg: format!("expected non-empty rank-2 input, got {:?}", inner.shape),
            });
        }
        let (r, c) = (inner.shape[0], inner.shape[1]);
        let mut out = vec![0.0; c];
        for row in inner.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o += *v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(vec![1, c], out, Op::MeanRows { x: self.clone() }, req))
    }

    /// Per-row cross entropy from logits against integer targets.
    /// A rank-1 input is treated as a single row; output shape is `[rows]`.
    pub fn cross_entropy_from_logits(&self, targets: &[usize]) -> Result<Tensor> {
        let inner = self.inner.borrow();
        let (rows, cols) = match inner.shape.len() {
            1 => (1, inner.shape[0]),
            2 => (inner.shape[0], inner.shape[1]),
            _ => {
                return Err(TensorError::Invalid {
                    op: "cross_entropy_from_logits",
                    msg: format!("expected rank 1 or 2, got {:?}", inner.shape),
                })
            }
        };
        if targets.len() != rows {
            return Err(TensorError::Invalid {
                op: "cross_entropy_from_logits",
                msg: format!("{} rows but {} targets", rows, targets.len()),
            });
        }
        let mut probs = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let t = targets[r];
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_from_logits",
                    index: t,
                    size: cols,
                });
            }
            let row = &inner.data[r * cols..(r + 1) * cols];
            let prow = &mut probs[r * cols..(r + 1) * cols];
            softmax_row(row, prow);
            // loss = logsumexp(row) - row[t], computed via the stable softmax
            out[r] = -prow[t].ln();
        }
        let req = inner.requires_grad;
        drop(inner);
        Ok(Tensor::new_node(
            vec![rows],
            out,
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
            },
            req,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Visits each reachable node
    /// exactly once and accumulates d(loss)/d(node) into every visited
    /// node's `grad`; repeated calls keep accumulating.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(TensorError::NotScalar {
                    op: "backward",
                    shape: inner.shape.clone(),
                });
            }
            if !inner.requires_grad {
                return Err(TensorError::Invalid {
                    op: "backward",
                    msg: "loss does not require grad".into(),
                });
            }
        }
        let topo = self.topo_order();
        let mut flowing: HashMap<*const RefCell<Inner>, Vec<f64>> = HashMap::new();
        flowing.insert(self.key(), vec![1.0]);

        for node in topo.iter().rev() {
            let Some(gout) = flowing.remove(&node.key()) else {
                continue;
            };
            node.apply_vjp(&gout, &mut flowing);
            // Persist this call's contribution on the node itself.
            let mut inner = node.inner.borrow_mut();
            match &mut inner.grad {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(gout.iter()) {
                        *a += *b;
                    }
                }
                None => inner.grad = Some(gout),
            }
        }
        Ok(())
    }

    /// Iterative DFS post-order over grad-requiring ancestors.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order: Vec<Tensor> = Vec::new();
        let mut state: HashMap<*const RefCell<Inner>, bool> = HashMap::new(); // false = open, true = done
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let k = node.key();
            if expanded {
                if !state.get(&k).copied().unwrap_or(false) {
                    state.insert(k, true);
                    order.push(node);
                }
                continue;
            }
            if state.contains_key(&k) {
                continue;
            }
            state.insert(k, false);
            stack.push((node.clone(), true));
            node.for_each_parent(|p| {
                if p.inner.borrow().requires_grad && !state.get(&p.key()).copied().unwrap_or(false)
                {
                    stack.push((p.clone(), false));
                }
            });
        }
        order
    }

    fn for_each_parent(&self, mut f: impl FnMut(&Tensor)) {
        let inner = self.inner.borrow();
        match &inner.op {
            Op::Leaf => {}
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                f(a);
                f(b);
            }
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Softmax { x }
            | Op::CausalSoftmax { x }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Mean { x }
            | Op::Sum { x }
            | Op::MeanRows { x } => f(x),
            Op::LayerNorm { x, gain, bias, .. } => {
                f(x);
                f(gain);
                f(bias);
            }
            Op::Gather { table, .. } => f(table),
            Op::Concat { parts, .. } => {
                for p in parts {
                    f(p);
                }
            }
            Op::CrossEntropy { logits, .. } => f(logits),
        }
    }

    fn apply_vjp(&self, gout: &[f64], flowing: &mut HashMap<*const RefCell<Inner>, Vec<f64>>) {
        let inner = self.inner.borrow();
        let accumulate = |flowing: &mut HashMap<*const RefCell<Inner>, Vec<f64>>, t: &Tensor, g: Vec<f64>| {
            if !t.inner.borrow().requires_grad {
                return;
            }
            match flowing.get_mut(&t.key()) {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(g.iter()) {
                        *a += *b;
                    }
                }
                None => {
                    flowing.insert(t.key(), g);
                }
            }
        };
        match &inner.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ai, bi) = (a.inner.borrow(), b.inner.borrow());
                let (m, k) = (ai.shape[0], ai.shape[1]);
                let n = bi.shape[1];
                // dA[i,p] = sum_j gout[i,j] * B[p,j]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bi.data[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow.iter()).map(|(g, b)| g * b).sum();
                    }
                }
                // dB[p,j] = sum_i A[i,p] * gout[i,j]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gout[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ai.data[i * k + p];
                        if av != 0.0 {
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, g) in dbrow.iter_mut().zip(grow.iter()) {
                                *d += av * g;
                            }
                        }
                    }
                }
                drop(ai);
                drop(bi);
                accumulate(flowing, a, da);
                accumulate(flowing, b, db);
            }
            Op::Transpose { x } => {
                let xi = x.inner.borrow();
                let (r, c) = (xi.shape[0], xi.shape[1]);
                drop(xi);
                // gout is c×r; transpose back to r×c.
                let g = transpose_data(gout, c, r);
                accumulate(flowing, x, g);
            }
            Op::Add { a, b } => {
                accumulate(flowing, a, gout.to_vec());
                let bn = b.numel();
                if bn == gout.len() {
                    accumulate(flowing, b, gout.to_vec());
                } else {
                    let mut gb = vec![0.0; bn];
                    for chunk in gout.chunks(bn) {
                        for (g, c) in gb.iter_mut().zip(chunk.iter()) {
                            *g += *c;
                        }
                    }
                    accumulate(flowing, b, gb);
                }
            }
            Op::Sub { a, b } => {
                accumulate(flowing, a, gout.to_vec());
                accumulate(flowing, b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul { a, b } => {
                let ga: Vec<f64> = {
                    let bi = b.inner.borrow();
                    gout.iter().zip(bi.data.iter()).map(|(g, v)| g * v).collect()
                };
                let gb: Vec<f64> = {
                    let ai = a.inner.borrow();
                    gout.iter().zip(ai.data.iter()).map(|(g, v)| g * v).collect()
                };
                accumulate(flowing, a, ga);
                accumulate(flowing, b, gb);
            }
            Op::Scale { x, c } => {
                accumulate(flowing, x, gout.iter().map(|g| g * c).collect());
            }
            Op::Gelu { x } => {
                let g: Vec<f64> = {
                    let xi = x.inner.borrow();
                    gout.iter()
                        .zip(xi.data.iter())
                        .map(|(g, &v)| g * gelu_bwd(v))
                        .collect()
                };
                accumulate(flowing, x, g);
            }
            Op::Softmax { x } => {
                let cols = *inner.shape.last().unwrap();
                let mut g = vec![0.0; inner.data.len()];
                for ((grow, orow), row) in g
                    .chunks_mut(cols)
                    .zip(inner.data.chunks(cols))
                    .zip(gout.chunks(cols))
                {
                    let dot: f64 = row.iter().zip(orow.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        grow[c] = orow[c] * (row[c] - dot);
                    }
                }
                accumulate(flowing, x, g);
            }
            Op::CausalSoftmax { x } => {
                let t = inner.shape[0];
                let mut g = vec![0.0; t * t];
                for i in 0..t {
                    let orow = &inner.data[i * t..i * t + i + 1];
                    let grow = &gout[i * t..i * t + i + 1];
                    let dot: f64 = grow.iter().zip(orow.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..=i {
                        g[i * t + c] = orow[c] * (grow[c] - dot);
                    }
                }
                accumulate(flowing, x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = *inner.shape.last().unwrap();
                let rows = inner.data.len() / cols;
                let gi = gain.inner.borrow();
                let mut gx = vec![0.0; inner.data.len()];
                let mut ggain = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                for r in 0..rows {
                    let nh = &normalized[r * cols..(r + 1) * cols];
                    let go = &gout[r * cols..(r + 1) * cols];
                    let mut mean_dy = 0.0;
                    let mut mean_dy_nh = 0.0;
                    for c in 0..cols {
                        let dy = go[c] * gi.data[c];
                        mean_dy += dy;
                        mean_dy_nh += dy * nh[c];
                        ggain[c] += go[c] * nh[c];
                        gbias[c] += go[c];
                    }
                    mean_dy /= cols as f64;
                    mean_dy_nh /= cols as f64;
                    for c in 0..cols {
                        let dy = go[c] * gi.data[c];
                        gx[r * cols + c] = inv_std[r] * (dy - mean_dy - nh[c] * mean_dy_nh);
                    }
                }
                drop(gi);
                accumulate(flowing, x, gx);
                accumulate(flowing, gain, ggain);
                accumulate(flowing, bias, gbias);
            }
            Op::Gather { table, indices } => {
                let ti = table.inner.borrow();
                let (k, d) = (ti.shape[0], ti.shape[1]);
                drop(ti);
                let mut g = vec![0.0; k * d];
                for (i, &idx) in indices.iter().enumerate() {
                    let src = &gout[i * d..(i + 1) * d];
                    let dst = &mut g[idx * d..(idx + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src.iter()) {
                        *a += *b;
                    }
                }
                accumulate(flowing, table, g);
            }
            Op::Concat { parts, axis } => {
                let out_shape = &inner.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner_stride: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for p in parts {
                    let pa = p.inner.borrow().shape[*axis];
                    offsets.push((acc, pa));
                    acc += pa;
                }
                for (p, (off, pa)) in parts.iter().zip(offsets.iter()) {
                    if !p.inner.borrow().requires_grad {
                        continue;
                    }
                    let mut g = vec![0.0; outer * pa * inner_stride];
                    for o in 0..outer {
                        let src_base = (o * total_axis + off) * inner_stride;
                        let dst_base = o * pa * inner_stride;
                        g[dst_base..dst_base + pa * inner_stride]
                            .copy_from_slice(&gout[src_base..src_base + pa * inner_stride]);
                    }
                    accumulate(flowing, p, g);
                }
            }
            Op::Slice { x, axis, start } => {
                let xi = x.inner.borrow();
                let xshape = xi.shape.clone();
                drop(xi);
                let outer: usize = xshape[..*axis].iter().product();
                let inner_stride: usize = xshape[*axis + 1..].iter().product();
                let axis_len = xshape[*axis];
                let slice_len = inner.shape[*axis];
                let mut g = vec![0.0; numel_of(&xshape)];
                for o in 0..outer {
                    let dst_base = (o * axis_len + start) * inner_stride;
                    let src_base = o * slice_len * inner_stride;
                    g[dst_base..dst_base + slice_len * inner_stride]
                        .copy_from_slice(&gout[src_base..src_base + slice_len * inner_stride]);
                }
                accumulate(flowing, x, g);
            }
            Op::Reshape { x } => {
                accumulate(flowing, x, gout.to_vec());
            }
            Op::Mean { x } => {
                let n = x.numel();
                let v = gout[0] / n as f64;
                accumulate(flowing, x, vec![v; n]);
            }
            Op::Sum { x } => {
                accumulate(flowing, x, vec![gout[0]; x.numel()]);
            }
            Op::MeanRows { x } => {
                let xi = x.inner.borrow();
                let (r, c) = (xi.shape[0], xi.shape[1]);
                drop(xi);
                let mut g = vec![0.0; r * c];
                for row in g.chunks_mut(c) {
                    for (gv, go) in row.iter_mut().zip(gout.iter()) {
                        *gv = go / r as f64;
                    }
                }
                accumulate(flowing, x, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = probs.len() / targets.len();
                let mut g = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let go = gout[r];
                    let prow = &probs[r * cols..(r + 1) * cols];
                    let grow = &mut g[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        grow[c] = go * prow[c];
                    }
                    grow[t] -= go;
                }
                accumulate(flowing, logits, g);
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

// ── Raw kernels ─────────────────────────────────────────────────────────

fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn suffix_broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    if rhs.len() > lhs.len() {
        return false;
    }
    lhs[lhs.len() - rhs.len()..] == *rhs
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests;
