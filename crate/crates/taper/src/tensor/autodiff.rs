//! Backward pass: reverse traversal of the recorded operation tape.

use std::collections::{BTreeMap, HashMap};

use super::{gelu_derivative, lane_iter, Tensor};

/// A recorded operation. Holds handles to its inputs plus whatever forward
/// values the vector-Jacobian product needs.
pub(crate) enum Op {
    Matmul { a: Tensor, b: Tensor },
    Transpose { x: Tensor },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, c: f64 },
    AddRowBias { x: Tensor, bias: Tensor },
    Gelu { x: Tensor },
    Exp { x: Tensor },
    Softmax { x: Tensor, axis: usize },
    LogSoftmax { x: Tensor, axis: usize },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        live_dims: usize,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Embedding { table: Tensor, ids: Vec<usize> },
    SliceCols { x: Tensor, start: usize, len: usize },
    ConcatCols { xs: Vec<Tensor>, widths: Vec<usize> },
    SelectRows { x: Tensor, rows: Vec<usize> },
    Pick { x: Tensor, coords: Vec<(usize, usize)> },
    Sum { x: Tensor },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Tensor> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a.clone(), b.clone()]
            }
            Op::AddRowBias { x, bias } => vec![x.clone(), bias.clone()],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x.clone(), gamma.clone(), beta.clone()],
            Op::ConcatCols { xs, .. } => xs.clone(),
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Exp { x }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SelectRows { x, .. }
            | Op::Pick { x, .. }
            | Op::Sum { x } => vec![x.clone()],
            Op::Embedding { table, .. } => vec![table.clone()],
        }
    }

    pub(crate) fn any_input_requires_grad(&self) -> bool {
        self.inputs().iter().any(|t| {
            let inner = t.inner.borrow();
            inner.requires_grad
        })
    }
}

struct GradSink<'a> {
    grads: &'a mut HashMap<u64, Vec<f64>>,
}

impl GradSink<'_> {
    fn add(&mut self, t: &Tensor, contribution: impl FnOnce(&mut [f64])) {
        let inner = t.inner.borrow();
        if !(inner.requires_grad || inner.op.is_some()) {
            return;
        }
        let entry = self.grads.entry(inner.id).or_insert_with(|| vec![0.0; inner.data.len()]);
        contribution(entry);
    }
}

/// Walk the tape reachable from `root` in reverse creation order (a reverse
/// topological order: inputs are always created before outputs) and
/// accumulate droot/dt into every `requires_grad` tensor.
pub(crate) fn backward(root: &Tensor) {
    {
        let inner = root.inner.borrow();
        assert_eq!(
            inner.data.len(),
            1,
            "backward requires a scalar root, got shape {:?}",
            inner.shape
        );
        assert!(
            inner.requires_grad,
            "backward root does not depend on any trainable tensor"
        );
    }

    // Collect the grad-relevant subgraph: nodes from which `requires_grad`
    // leaves are reachable. Ordered by creation id.
    let mut nodes: BTreeMap<u64, Tensor> = BTreeMap::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        let id = t.id();
        if nodes.contains_key(&id) {
            continue;
        }
        let inputs = {
            let inner = t.inner.borrow();
            inner.op.as_ref().map(|op| op.inputs()).unwrap_or_default()
        };
        nodes.insert(id, t);
        for input in inputs {
            let relevant = {
                let inner = input.inner.borrow();
                inner.requires_grad || inner.op.is_some()
            };
            if relevant {
                stack.push(input);
            }
        }
    }

    // Per-pass gradients, keyed by tensor id.
    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(root.id(), vec![1.0]);

    for (&id, t) in nodes.iter().rev() {
        let Some(g) = grads.remove(&id) else { continue };
        {
            let mut inner = t.inner.borrow_mut();
            if inner.requires_grad {
                match &mut inner.grad {
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(g.iter()) {
                            *a += gi;
                        }
                    }
                    None => inner.grad = Some(g.clone()),
                }
            }
        }
        let inner = t.inner.borrow();
        if let Some(op) = &inner.op {
            let mut sink = GradSink { grads: &mut grads };
            propagate(op, &g, &mut sink);
        }
    }
}

fn propagate(op: &Op, g: &[f64], sink: &mut GradSink) {
    match op {
        Op::Matmul { a, b } => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            {
                let bd = b.inner.borrow();
                sink.add(a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += gij * bd.data[kk * n + j];
                            }
                        }
                    }
                });
            }
            let ad = a.inner.borrow();
            sink.add(b, |db| {
                for i in 0..m {
                    for kk in 0..k {
                        let aik = ad.data[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
            });
        }
        Op::Transpose { x } => {
            let (m, n) = (x.rows(), x.cols());
            sink.add(x, |dx| {
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] += g[j * m + i];
                    }
                }
            });
        }
        Op::Add { a, b } => {
            sink.add(a, |da| {
                for (d, gi) in da.iter_mut().zip(g.iter()) {
                    *d += gi;
                }
            });
            sink.add(b, |db| {
                for (d, gi) in db.iter_mut().zip(g.iter()) {
                    *d += gi;
                }
            });
        }
        Op::Sub { a, b } => {
            sink.add(a, |da| {
                for (d, gi) in da.iter_mut().zip(g.iter()) {
                    *d += gi;
                }
            });
            sink.add(b, |db| {
                for (d, gi) in db.iter_mut().zip(g.iter()) {
                    *d -= gi;
                }
            });
        }
        Op::Mul { a, b } => {
            {
                let bd = b.inner.borrow();
                sink.add(a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bd.data[i];
                    }
                });
            }
            let ad = a.inner.borrow();
            sink.add(b, |db| {
                for i in 0..g.len() {
                    db[i] += g[i] * ad.data[i];
                }
            });
        }
        Op::Scale { x, c } => {
            sink.add(x, |dx| {
                for (d, gi) in dx.iter_mut().zip(g.iter()) {
                    *d += c * gi;
                }
            });
        }
        Op::AddRowBias { x, bias } => {
            let (m, n) = (x.rows(), x.cols());
            sink.add(x, |dx| {
                for (d, gi) in dx.iter_mut().zip(g.iter()) {
                    *d += gi;
                }
            });
            sink.add(bias, |db| {
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
            });
        }
        Op::Gelu { x } => {
            let xd = x.inner.borrow();
            sink.add(x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * gelu_derivative(xd.data[i]);
                }
            });
        }
        Op::Exp { x } => {
            let xd = x.inner.borrow();
            sink.add(x, |dx| {
                for i in 0..g.len() {
                    dx[i] += g[i] * xd.data[i].exp();
                }
            });
        }
        Op::Softmax { x, axis } => {
            // Needs the softmax output: recompute per lane from x (stable).
            let xd = x.inner.borrow();
            let lanes = lane_iter(&xd.shape, *axis);
            sink.add(x, |dx| {
                for lane in &lanes {
                    let max = lane.iter().map(|&i| xd.data[i]).fold(f64::NEG_INFINITY, f64::max);
                    let mut y: Vec<f64> = lane.iter().map(|&i| (xd.data[i] - max).exp()).collect();
                    let sum: f64 = y.iter().sum();
                    for v in y.iter_mut() {
                        *v /= sum;
                    }
                    let dot: f64 = lane.iter().zip(y.iter()).map(|(&i, &yi)| g[i] * yi).sum();
                    for (idx, &i) in lane.iter().enumerate() {
                        dx[i] += y[idx] * (g[i] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { x, axis } => {
            let xd = x.inner.borrow();
            let lanes = lane_iter(&xd.shape, *axis);
            sink.add(x, |dx| {
                for lane in &lanes {
                    let max = lane.iter().map(|&i| xd.data[i]).fold(f64::NEG_INFINITY, f64::max);
                    let mut y: Vec<f64> = lane.iter().map(|&i| (xd.data[i] - max).exp()).collect();
                    let sum: f64 = y.iter().sum();
                    for v in y.iter_mut() {
                        *v /= sum;
                    }
                    let gsum: f64 = lane.iter().map(|&i| g[i]).sum();
                    for (idx, &i) in lane.iter().enumerate() {
                        dx[i] += g[i] - y[idx] * gsum;
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, live_dims, means, rstds } => {
            let (m, n) = (x.rows(), x.cols());
            let nl = *live_dims as f64;
            let xd = x.inner.borrow();
            let gd = gamma.inner.borrow();
            sink.add(gamma, |dg| {
                for i in 0..m {
                    let (mean, rstd) = (means[i], rstds[i]);
                    for j in 0..n {
                        let xhat = (xd.data[i * n + j] - mean) * rstd;
                        dg[j] += g[i * n + j] * xhat;
                    }
                }
            });
            sink.add(beta, |db| {
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g[i * n + j];
                    }
                }
            });
            sink.add(x, |dx| {
                for i in 0..m {
                    let (mean, rstd) = (means[i], rstds[i]);
                    let mut sum_h = 0.0;
                    let mut sum_hx = 0.0;
                    for j in 0..n {
                        let h = g[i * n + j] * gd.data[j];
                        let xhat = (xd.data[i * n + j] - mean) * rstd;
                        sum_h += h;
                        sum_hx += h * xhat;
                    }
                    for j in 0..n {
                        let h = g[i * n + j] * gd.data[j];
                        let xhat = (xd.data[i * n + j] - mean) * rstd;
                        dx[i * n + j] += rstd * (h - sum_h / nl - xhat * sum_hx / nl);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = table.cols();
            sink.add(table, |dt| {
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
            });
        }
        Op::SliceCols { x, start, len } => {
            let n = x.cols();
            let m = x.rows();
            sink.add(x, |dx| {
                for i in 0..m {
                    for j in 0..*len {
                        dx[i * n + start + j] += g[i * len + j];
                    }
                }
            });
        }
        Op::ConcatCols { xs, widths } => {
            let n: usize = widths.iter().sum();
            let m = xs[0].rows();
            let mut offset = 0;
            for (x, &w) in xs.iter().zip(widths.iter()) {
                let off = offset;
                sink.add(x, |dx| {
                    for i in 0..m {
                        for j in 0..w {
                            dx[i * w + j] += g[i * n + off + j];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SelectRows { x, rows } => {
            let n = x.cols();
            sink.add(x, |dx| {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += g[i * n + j];
                    }
                }
            });
        }
        Op::Pick { x, coords } => {
            let n = x.cols();
            sink.add(x, |dx| {
                for (i, &(r, c)) in coords.iter().enumerate() {
                    dx[r * n + c] += g[i];
                }
            });
        }
        Op::Sum { x } => {
            sink.add(x, |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            });
        }
    }
}
