//! Dense f64 tensors with reverse-mode differentiation.
//!
//! Every tensor is a flat row-major buffer plus a shape. Operations record
//! the graph needed for `backward` directly on their output tensors: a node
//! stores handles to its inputs, so the recorded chain of operations forms a
//! tape ordered by creation id. `backward` walks that tape in reverse
//! creation order, which is a reverse topological order, and visits every
//! node exactly once. Gradients accumulate into `grad` of every tensor with
//! `requires_grad` set; repeated `backward` calls without zeroing accumulate.
//!
//! The engine is single-threaded and deliberately small: matmul, transpose,
//! elementwise arithmetic, softmax/log-softmax along an axis, layernorm,
//! GELU, embedding lookup, column slicing/concat, row/entry gathers and a
//! full sum. Zero-size dimensions are rejected at construction.

mod autodiff;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub(crate) use autodiff::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct TensorInner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

/// Shared handle to a tensor. `Clone` is cheap and aliases storage; use
/// [`Tensor::deep_clone`] for an independent copy.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<RefCell<TensorInner>>,
}

fn check_shape(shape: &[usize]) -> usize {
    assert!(!shape.is_empty(), "tensor shape must have at least one dimension");
    for &d in shape {
        assert!(d > 0, "zero-size dimension rejected: shape {:?}", shape);
    }
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let numel = check_shape(shape);
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} wants {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        for (i, v) in data.iter().enumerate() {
            assert!(v.is_finite(), "non-finite value {} at index {}", v, i);
        }
        Tensor::raw(shape.to_vec(), data, false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = check_shape(shape);
        Tensor::raw(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(shape, data);
        t.inner.borrow_mut().requires_grad = true;
        t
    }

    pub(crate) fn raw(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Option<Op>,
    ) -> Tensor {
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                id,
                shape,
                data,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        let requires_grad = op.any_input_requires_grad();
        let op = if requires_grad { Some(op) } else { None };
        Tensor::raw(shape, data, requires_grad, op)
    }

    // ── accessors ────────────────────────────────────────────────────

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        let s = self.shape();
        assert_eq!(s.len(), 2, "rows() needs a 2-D tensor, got shape {:?}", s);
        s[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        let s = self.shape();
        assert_eq!(s.len(), 2, "cols() needs a 2-D tensor, got shape {:?}", s);
        s[1]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Raw bit pattern of the data, for bit-identity assertions.
    pub fn data_bits(&self) -> Vec<u64> {
        self.inner.borrow().data.iter().map(|v| v.to_bits()).collect()
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() needs a scalar, got shape {:?}", inner.shape);
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    /// Mutate the data in place (optimizer updates, masking, tests). The
    /// tensor must be a leaf: rewriting an op output would desynchronize the
    /// recorded tape.
    pub fn apply<F: FnOnce(&mut [f64])>(&self, f: F) {
        let mut inner = self.inner.borrow_mut();
        assert!(inner.op.is_none(), "in-place update of a non-leaf tensor");
        f(&mut inner.data);
    }

    /// Independent copy of shape/data/requires_grad. Grad and tape state are
    /// not carried over.
    pub fn deep_clone(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::raw(inner.shape.clone(), inner.data.clone(), inner.requires_grad, None)
    }

    /// Detached view of the same values as a fresh constant leaf.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::raw(inner.shape.clone(), inner.data.clone(), false, None)
    }

    // ── operations ───────────────────────────────────────────────────

    /// Standard matrix product of 2-D tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul dimension error: {}x{} times {}x{}", m, k, k2, n);
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = a.data[i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = kk * n;
                let orow = i * n;
                for j in 0..n {
                    out[orow + j] += aik * b.data[brow + j];
                }
            }
        }
        drop(a);
        drop(b);
        Tensor::from_op(vec![m, n], out, Op::Matmul { a: self.clone(), b: other.clone() })
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let x = self.inner.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x.data[i * n + j];
            }
        }
        drop(x);
        Tensor::from_op(vec![n, m], out, Op::Transpose { x: self.clone() })
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.zip_with(other, |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn zip_with(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise op shape mismatch: {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let out: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape.clone();
        drop(a);
        drop(b);
        Tensor::from_op(shape, out, op(self.clone(), other.clone()))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let x = self.inner.borrow();
        let out: Vec<f64> = x.data.iter().map(|&v| c * v).collect();
        let shape = x.shape.clone();
        drop(x);
        Tensor::from_op(shape, out, Op::Scale { x: self.clone(), c })
    }

    /// Add a length-n bias vector to every row of an m-by-n tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(
            bias.shape(),
            vec![n],
            "bias shape {:?} does not match row width {}",
            bias.shape(),
            n
        );
        let x = self.inner.borrow();
        let b = bias.inner.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = x.data[i * n + j] + b.data[j];
            }
        }
        drop(x);
        drop(b);
        Tensor::from_op(vec![m, n], out, Op::AddRowBias { x: self.clone(), bias: bias.clone() })
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        let x = self.inner.borrow();
        let out: Vec<f64> = x.data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = x.shape.clone();
        drop(x);
        Tensor::from_op(shape, out, Op::Gelu { x: self.clone() })
    }

    pub fn exp(&self) -> Tensor {
        let x = self.inner.borrow();
        let out: Vec<f64> = x.data.iter().map(|&v| v.exp()).collect();
        let shape = x.shape.clone();
        drop(x);
        Tensor::from_op(shape, out, Op::Exp { x: self.clone() })
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (shape, out) = lane_map(self, axis, |lane, out| {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        });
        Tensor::from_op(shape, out, Op::Softmax { x: self.clone(), axis })
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let (shape, out) = lane_map(self, axis, |lane, out| {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = lane.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                *o = v - logsum;
            }
        });
        Tensor::from_op(shape, out, Op::LogSoftmax { x: self.clone(), axis })
    }

    /// Row-wise layer normalization of a 2-D tensor.
    ///
    /// `live_dims` is the divisor for the mean/variance moments. It defaults
    /// to the row width; a masked model passes the count of unpruned hidden
    /// dimensions so that rows whose masked entries are exactly zero
    /// normalize identically to a physically narrowed model.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64, live_dims: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(gamma.shape(), vec![n], "layernorm gamma shape mismatch");
        assert_eq!(beta.shape(), vec![n], "layernorm beta shape mismatch");
        assert!(live_dims >= 1 && live_dims <= n, "live_dims {} out of range 1..={}", live_dims, n);
        let x = self.inner.borrow();
        let g = gamma.inner.borrow();
        let b = beta.inner.borrow();
        let nl = live_dims as f64;
        let mut out = vec![0.0; m * n];
        let mut means = vec![0.0; m];
        let mut rstds = vec![0.0; m];
        for i in 0..m {
            let row = &x.data[i * n..(i + 1) * n];
            let s1: f64 = row.iter().sum();
            let s2: f64 = row.iter().map(|v| v * v).sum();
            let mean = s1 / nl;
            let var = (s2 / nl - mean * mean).max(0.0);
            let rstd = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            rstds[i] = rstd;
            for j in 0..n {
                out[i * n + j] = g.data[j] * (row[j] - mean) * rstd + b.data[j];
            }
        }
        drop(x);
        drop(g);
        drop(b);
        Tensor::from_op(
            vec![m, n],
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                live_dims,
                means,
                rstds,
            },
        )
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embedding(&self, ids: &[usize]) -> Tensor {
        let (v, d) = (self.rows(), self.cols());
        assert!(!ids.is_empty(), "embedding lookup with no ids");
        let table = self.inner.borrow();
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "token id {} out of range for vocab {}", id, v);
            out[i * d..(i + 1) * d].copy_from_slice(&table.data[id * d..(id + 1) * d]);
        }
        drop(table);
        Tensor::from_op(
            vec![ids.len(), d],
            out,
            Op::Embedding { table: self.clone(), ids: ids.to_vec() },
        )
    }

    /// Columns [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert!(len > 0 && start + len <= n, "column slice {}..{} out of range {}", start, start + len, n);
        let x = self.inner.borrow();
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&x.data[i * n + start..i * n + start + len]);
        }
        drop(x);
        Tensor::from_op(vec![m, len], out, Op::SliceCols { x: self.clone(), start, len })
    }

    /// Concatenate 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let m = parts[0].rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.rows(), m, "concat row mismatch");
                p.cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(widths.iter()) {
            let data = p.inner.borrow();
            for i in 0..m {
                out[i * n + offset..i * n + offset + w]
                    .copy_from_slice(&data.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        Tensor::from_op(vec![m, n], out, Op::ConcatCols { xs: parts.to_vec(), widths })
    }

    /// Gather full rows by index; duplicate indices are allowed.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert!(!rows.is_empty(), "select_rows with no indices");
        let x = self.inner.borrow();
        let mut out = vec![0.0; rows.len() * n];
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < m, "row index {} out of range {}", r, m);
            out[i * n..(i + 1) * n].copy_from_slice(&x.data[r * n..(r + 1) * n]);
        }
        drop(x);
        Tensor::from_op(
            vec![rows.len(), n],
            out,
            Op::SelectRows { x: self.clone(), rows: rows.to_vec() },
        )
    }

    /// Gather single entries (row, col) into a vector.
    pub fn pick(&self, coords: &[(usize, usize)]) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert!(!coords.is_empty(), "pick with no coordinates");
        let x = self.inner.borrow();
        let mut out = vec![0.0; coords.len()];
        for (i, &(r, c)) in coords.iter().enumerate() {
            assert!(r < m && c < n, "pick index ({},{}) out of range {}x{}", r, c, m, n);
            out[i] = x.data[r * n + c];
        }
        drop(x);
        Tensor::from_op(
            vec![coords.len()],
            out,
            Op::Pick { x: self.clone(), coords: coords.to_vec() },
        )
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Tensor {
        let x = self.inner.borrow();
        let s: f64 = x.data.iter().sum();
        drop(x);
        Tensor::from_op(vec![1], vec![s], Op::Sum { x: self.clone() })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Reverse-mode gradient of a scalar with respect to every reachable
    /// tensor that has `requires_grad` set. Gradients accumulate; call
    /// `zero_grad` on leaves between steps.
    pub fn backward(&self) {
        autodiff::backward(self);
    }
}

/// Mean squared error between two equally shaped tensors (mean over all
/// elements).
pub fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.sub(b);
    d.mul(&d).mean()
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Apply `f` to every lane along `axis`, writing into a same-shape output.
/// Returns (shape, output).
fn lane_map(
    t: &Tensor,
    axis: usize,
    f: impl Fn(&[f64], &mut [f64]),
) -> (Vec<usize>, Vec<f64>) {
    let shape = t.shape();
    assert!(axis < shape.len(), "axis {} out of range for shape {:?}", axis, shape);
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let x = t.inner.borrow();
    let mut out = vec![0.0; x.data.len()];
    let mut lane = vec![0.0; axis_len];
    let mut lane_out = vec![0.0; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..axis_len {
                lane[k] = x.data[(o * axis_len + k) * inner + i];
            }
            f(&lane, &mut lane_out);
            for k in 0..axis_len {
                out[(o * axis_len + k) * inner + i] = lane_out[k];
            }
        }
    }
    (shape, out)
}

pub(crate) fn lane_iter(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    // Index sets for each lane along `axis`; used by backward passes.
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lanes = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            lanes.push((0..axis_len).map(|k| (o * axis_len + k) * inner + i).collect());
        }
    }
    lanes
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}
