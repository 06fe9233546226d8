//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation is a method on [`Tape`] taking and returning
//! [`Var`] handles. The forward value is computed eagerly; a backward rule is
//! recorded only when at least one input requires a gradient, so a tape whose
//! leaves are all constants doubles as a plain inference context.

use std::cell::RefCell;
use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered record of operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    ops_visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of recorded operations whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.ops_visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of recorded nodes that carry a backward rule.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.borrow().iter().filter(|n| n.backward.is_some()).count()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn record<F>(&self, op: &str, value: Tensor, parents: &[Var], make_backward: F) -> Result<Var>
    where
        F: FnOnce() -> BackwardFn,
    {
        value.ensure_finite(op)?;
        let requires_grad = parents.iter().any(|&p| self.requires_grad(p));
        let backward = requires_grad.then(make_backward);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let mut ops_visited = 0;
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            ops_visited += 1;
            let parent_grads = backward(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(Gradients { grads, ops_visited })
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = kernels::matmul(&av, &bv)?;
        self.record("matmul", out, &[a, b], || {
            Box::new(move |g| {
                let da = kernels::matmul(g, &kernels::transpose(&bv).unwrap()).unwrap();
                let db = kernels::matmul(&kernels::transpose(&av).unwrap(), g).unwrap();
                vec![Some(da), Some(db)]
            })
        })
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let out = kernels::transpose(&self.value(a))?;
        self.record("transpose", out, &[a], || {
            Box::new(|g| vec![Some(kernels::transpose(g).unwrap())])
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let orig = av.shape().to_vec();
        let out = av.reshape(shape)?;
        self.record("reshape", out, &[a], || {
            Box::new(move |g| vec![Some(g.reshape(&orig).unwrap())])
        })
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        self.record("add", out, &[a, b], || Box::new(|g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        self.record("sub", out, &[a, b], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.zip_map(&bv, |x, y| x * y)?;
        self.record("mul", out, &[a, b], || {
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&bv, |x, y| x * y).unwrap()),
                    Some(g.zip_map(&av, |x, y| x * y).unwrap()),
                ]
            })
        })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, a: Var, c: Tensor) -> Result<Var> {
        let c = Arc::new(c);
        let out = self.value(a).zip_map(&c, |x, y| x * y)?;
        self.record("mul_const", out, &[a], || {
            Box::new(move |g| vec![Some(g.zip_map(&c, |x, y| x * y).unwrap())])
        })
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.record("scale", out, &[a], || Box::new(move |g| vec![Some(g.map(|v| v * s))]))
    }

    /// Multiplies every row of `x [.., d]` elementwise by `w [d]`.
    pub fn mul_last(&self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.last_dim();
        if wv.shape() != [d] {
            return Err(shape_err!("mul_last weight {:?} for last axis {d}", wv.shape()));
        }
        let mut out = (*xv).clone();
        for r in 0..out.rows() {
            for (v, s) in out.row_mut(r).iter_mut().zip(wv.data()) {
                *v *= s;
            }
        }
        self.record("mul_last", out, &[x, w], || {
            Box::new(move |g| {
                let mut dx = g.clone();
                let mut dw = vec![0.0; d];
                for r in 0..dx.rows() {
                    let xr = xv.row(r);
                    for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                        dw[j] += *v * xr[j];
                        *v *= wv.data()[j];
                    }
                }
                vec![Some(dx), Some(Tensor::vector(dw))]
            })
        })
    }

    /// Scales row `i` of `x [m,d]` by `w[i]`, with `w` of shape `[m]`.
    pub fn mul_rows(&self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.shape() != [xv.shape()[0]] {
            return Err(shape_err!("mul_rows {:?} by {:?}", xv.shape(), wv.shape()));
        }
        let mut out = (*xv).clone();
        for (r, &s) in wv.data().iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.record("mul_rows", out, &[x, w], || {
            Box::new(move |g| {
                let mut dx = g.clone();
                let mut dw = vec![0.0; wv.numel()];
                for (r, &s) in wv.data().iter().enumerate() {
                    dw[r] = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                vec![Some(dx), Some(Tensor::vector(dw))]
            })
        })
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out = kernels::silu(&av);
        self.record("silu", out, &[a], || {
            Box::new(move |g| {
                let d = av.map(|z| {
                    let s = kernels::sigmoid(z);
                    s * (1.0 + z * (1.0 - s))
                });
                vec![Some(g.zip_map(&d, |x, y| x * y).unwrap())]
            })
        })
    }

    // ---- reductions ----

    pub fn sum(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.sum());
        self.record("sum", out, &[a], || {
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err!("mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums of `x [m,n]`, giving `[n]`.
    pub fn sum_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(shape_err!("sum_rows expects rank 2, got {:?}", xv.shape()));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.record("sum_rows", Tensor::vector(out), &[x], || {
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    dx.row_mut(r).copy_from_slice(g.data());
                }
                vec![Some(dx)]
            })
        })
    }

    // ---- indexing and layout (rank-2) ----

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + len > xv.shape()[1] {
            return Err(shape_err!("slice_cols {start}+{len} of {:?}", xv.shape()));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        self.record("slice_cols", Tensor::from_parts(vec![m, len], out), &[x], || {
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    dx.row_mut(r)[start..start + len].copy_from_slice(g.row(r));
                }
                vec![Some(dx)]
            })
        })
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let m = vals.first().map(|v| v.shape()[0]).ok_or_else(|| shape_err!("concat of nothing"))?;
        if vals.iter().any(|v| v.rank() != 2 || v.shape()[0] != m) {
            return Err(shape_err!("concat_cols row mismatch"));
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for v in &vals {
                out.extend_from_slice(v.row(r));
            }
        }
        self.record("concat_cols", Tensor::from_parts(vec![m, total], out), parts, || {
            Box::new(move |g| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        Some(Tensor::from_parts(vec![m, w], d))
                    })
                    .collect()
            })
        })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let n = vals.first().map(|v| v.last_dim()).ok_or_else(|| shape_err!("concat of nothing"))?;
        if vals.iter().any(|v| v.rank() != 2 || v.shape()[1] != n) {
            return Err(shape_err!("concat_rows column mismatch"));
        }
        let heights: Vec<usize> = vals.iter().map(|v| v.shape()[0]).collect();
        let mut out = Vec::with_capacity(heights.iter().sum::<usize>() * n);
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let m = out.len() / n.max(1);
        self.record("concat_rows", Tensor::from_parts(vec![m, n], out), parts, || {
            Box::new(move |g| {
                let mut offset = 0;
                heights
                    .iter()
                    .map(|&h| {
                        let d = g.data()[offset * n..(offset + h) * n].to_vec();
                        offset += h;
                        Some(Tensor::from_parts(vec![h, n], d))
                    })
                    .collect()
            })
        })
    }

    /// Rows `x[idx[0]], x[idx[1]], …` of `x [n,d]`.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(shape_err!("gather_rows expects rank 2, got {:?}", xv.shape()));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {bad} of {n}")));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let idx = idx.to_vec();
        self.record("gather_rows", Tensor::from_parts(vec![idx.len(), d], out), &[x], || {
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&[n, d]);
                for (k, &i) in idx.iter().enumerate() {
                    for (a, b) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *a += b;
                    }
                }
                vec![Some(dx)]
            })
        })
    }

    /// Adjoint of [`Tape::gather_rows`]: row `k` of `x` is added into row `idx[k]`
    /// of an `[n_rows, d]` zero tensor.
    pub fn scatter_add_rows(&self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != idx.len() {
            return Err(shape_err!("scatter_add_rows {:?} with {} indices", xv.shape(), idx.len()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Index(format!("row {bad} of {n_rows}")));
        }
        let d = xv.shape()[1];
        let mut out = Tensor::zeros(&[n_rows, d]);
        for (k, &i) in idx.iter().enumerate() {
            for (a, b) in out.row_mut(i).iter_mut().zip(xv.row(k)) {
                *a += b;
            }
        }
        let idx = idx.to_vec();
        self.record("scatter_add_rows", out, &[x], || {
            Box::new(move |g| {
                let mut dx = Vec::with_capacity(idx.len() * d);
                for &i in &idx {
                    dx.extend_from_slice(g.row(i));
                }
                vec![Some(Tensor::from_parts(vec![idx.len(), d], dx))]
            })
        })
    }

    /// Picks `x[r][c]` for each `(r, c)` into a vector.
    pub fn gather_elems(&self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(shape_err!("gather_elems expects rank 2, got {:?}", xv.shape()));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&(r, c)) = idx.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(Error::Index(format!("element ({r},{c}) of [{m},{n}]")));
        }
        let out = idx.iter().map(|&(r, c)| xv.data()[r * n + c]).collect();
        let idx = idx.to_vec();
        self.record("gather_elems", Tensor::vector(out), &[x], || {
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&[m, n]);
                for (k, &(r, c)) in idx.iter().enumerate() {
                    dx.data_mut()[r * n + c] += g.data()[k];
                }
                vec![Some(dx)]
            })
        })
    }

    /// Divides each row of `x` by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = (*xv).clone();
        let mut sums = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let total: f64 = xv.row(r).iter().sum();
            if !(total > 0.0) {
                return Err(Error::Contract(format!("row {r} sums to {total}, cannot normalize")));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= total);
            sums.push(total);
        }
        let y = Arc::new(out.clone());
        self.record("normalize_rows", out, &[x], || {
            Box::new(move |g| {
                let mut dx = g.clone();
                for (r, &total) in sums.iter().enumerate() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    dx.row_mut(r).iter_mut().for_each(|v| *v = (*v - dot) / total);
                }
                vec![Some(dx)]
            })
        })
    }

    // ---- fused layers ----

    /// RMS normalization over the last axis; see [`kernels::rmsnorm`].
    pub fn rmsnorm(&self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let out = kernels::rmsnorm(&xv, &gv, eps)?;
        self.record("rmsnorm", out, &[x, gain], || {
            Box::new(move |g| {
                let d = xv.last_dim();
                let mut dx = g.clone();
                let mut dgain = vec![0.0; d];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let inv = 1.0 / kernels::rms(xr, eps);
                    let gr = g.row(r);
                    let mut dot = 0.0;
                    for j in 0..d {
                        let n = xr[j] * inv;
                        dgain[j] += gr[j] * n;
                        dot += gr[j] * gv.data()[j] * n;
                    }
                    dot /= d as f64;
                    for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                        let n = xr[j] * inv;
                        *v = inv * (gr[j] * gv.data()[j] - n * dot);
                    }
                }
                vec![Some(dx), Some(Tensor::vector(dgain))]
            })
        })
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis; masked-out entries are exactly zero.
    pub fn softmax_masked(&self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = kernels::softmax_masked(&self.value(x), mask)?;
        let y = Arc::new(out.clone());
        self.record("softmax", out, &[x], || {
            Box::new(move |g| {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (v, &p) in dx.row_mut(r).iter_mut().zip(yr) {
                        *v = p * (*v - dot);
                    }
                }
                vec![Some(dx)]
            })
        })
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let out = kernels::log_softmax(&self.value(x))?;
        let y = Arc::new(out.clone());
        self.record("log_softmax", out, &[x], || {
            Box::new(move |g| {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (v, &lp) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *v -= lp.exp() * total;
                    }
                }
                vec![Some(dx)]
            })
        })
    }

    /// Mean cross-entropy of `targets` under `logits [t,V]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[u32]) -> Result<Var> {
        let w = vec![1.0 / targets.len().max(1) as f64; targets.len()];
        self.cross_entropy_weighted(logits, targets, &w)
    }

    /// `Σ_t weights[t] · (−log softmax(logits_t)[targets[t]])`.
    pub fn cross_entropy_weighted(&self, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        kernels::check_targets(&lv, targets)?;
        if weights.len() != targets.len() {
            return Err(shape_err!("{} weights for {} targets", weights.len(), targets.len()));
        }
        let lsm = kernels::log_softmax(&lv)?;
        let loss: f64 = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(t, (&y, &w))| if w == 0.0 { 0.0 } else { -w * lsm.row(t)[y as usize] })
            .sum();
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        self.record("cross_entropy", Tensor::scalar(loss), &[logits], || {
            Box::new(move |g| {
                let s = g.data()[0];
                let mut dx = lsm.map(f64::exp);
                for (t, (&y, &w)) in targets.iter().zip(&weights).enumerate() {
                    let row = dx.row_mut(t);
                    row[y as usize] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s * w);
                }
                vec![Some(dx)]
            })
        })
    }

    /// `log softmax(logits_t)[targets[t]]` for each row, shape `[t]`.
    pub fn token_log_probs(&self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lv = self.value(logits);
        kernels::check_targets(&lv, targets)?;
        let lsm = kernels::log_softmax(&lv)?;
        let out = targets.iter().enumerate().map(|(t, &y)| lsm.row(t)[y as usize]).collect();
        let targets = targets.to_vec();
        self.record("token_log_probs", Tensor::vector(out), &[logits], || {
            Box::new(move |g| {
                let mut dx = lsm.map(f64::exp);
                for (t, &y) in targets.iter().enumerate() {
                    let gt = g.data()[t];
                    let row = dx.row_mut(t);
                    row.iter_mut().for_each(|v| *v *= -gt);
                    row[y as usize] += gt;
                }
                vec![Some(dx)]
            })
        })
    }

    /// Mean over rows of `KL(teacher ∥ softmax(student_logits))`.
    pub fn kl_teacher_student(&self, student_logits: Var, teacher_probs: &Tensor) -> Result<Var> {
        let sv = self.value(student_logits);
        if sv.shape() != teacher_probs.shape() || sv.rank() != 2 || sv.shape()[0] == 0 {
            return Err(shape_err!(
                "student logits {:?} vs teacher probs {:?}",
                sv.shape(),
                teacher_probs.shape()
            ));
        }
        let rows = sv.shape()[0];
        let lsm = kernels::log_softmax(&sv)?;
        let kl = kl_rows(teacher_probs, &lsm) / rows as f64;
        let teacher = Arc::new(teacher_probs.clone());
        self.record("kl_teacher_student", Tensor::scalar(kl), &[student_logits], || {
            Box::new(move |g| {
                let s = g.data()[0] / rows as f64;
                let mut dx = lsm.map(f64::exp);
                for r in 0..rows {
                    for (v, p) in dx.row_mut(r).iter_mut().zip(teacher.row(r)) {
                        *v = s * (*v - p);
                    }
                }
                vec![Some(dx)]
            })
        })
    }

    /// Mean over rows of `KL(softmax(student_logits) ∥ teacher)`, the teacher
    /// given as log-probabilities.
    pub fn kl_student_teacher(&self, student_logits: Var, teacher_log_probs: &Tensor) -> Result<Var> {
        let sv = self.value(student_logits);
        if sv.shape() != teacher_log_probs.shape() || sv.rank() != 2 || sv.shape()[0] == 0 {
            return Err(shape_err!(
                "student logits {:?} vs teacher log-probs {:?}",
                sv.shape(),
                teacher_log_probs.shape()
            ));
        }
        let rows = sv.shape()[0];
        let lsm = kernels::log_softmax(&sv)?;
        let q = lsm.map(f64::exp);
        let per_row: Vec<f64> = (0..rows)
            .map(|r| kl_rows(&Tensor::vector(q.row(r).to_vec()), &Tensor::vector(teacher_log_probs.row(r).to_vec())))
            .collect();
        let kl = per_row.iter().sum::<f64>() / rows as f64;
        let teacher = Arc::new(teacher_log_probs.clone());
        self.record("kl_student_teacher", Tensor::scalar(kl), &[student_logits], || {
            Box::new(move |g| {
                let s = g.data()[0] / rows as f64;
                let mut dx = q.clone();
                for (r, row_kl) in per_row.iter().enumerate() {
                    let (lq, lp) = (lsm.row(r), teacher.row(r));
                    for (j, v) in dx.row_mut(r).iter_mut().enumerate() {
                        *v = if *v > 0.0 { s * *v * (lq[j] - lp[j] - row_kl) } else { 0.0 };
                    }
                }
                vec![Some(dx)]
            })
        })
    }

    /// Clipped policy-gradient surrogate, negated so it can be minimized:
    /// `−mean_i min(ρ_i·A_i, clip(ρ_i, 1−ε, 1+ε)·A_i)` with `ρ_i = exp(logp_i − old_i)`.
    pub fn clipped_surrogate(&self, logp: Var, old_logp: &[f64], adv: &[f64], eps: f64) -> Result<Var> {
        let lv = self.value(logp);
        let n = lv.numel();
        if old_logp.len() != n || adv.len() != n || n == 0 {
            return Err(shape_err!("surrogate over {n} tokens with {} / {} refs", old_logp.len(), adv.len()));
        }
        let mut total = 0.0;
        let mut slope = vec![0.0; n];
        for i in 0..n {
            let ratio = (lv.data()[i] - old_logp[i]).exp();
            let unclipped = ratio * adv[i];
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv[i];
            if unclipped <= clipped {
                total += unclipped;
                slope[i] = unclipped;
            } else {
                total += clipped;
            }
        }
        let out = Tensor::scalar(-total / n as f64);
        self.record("clipped_surrogate", out, &[logp], || {
            Box::new(move |g| {
                let s = -g.data()[0] / n as f64;
                vec![Some(Tensor::vector(slope.iter().map(|v| s * v).collect()))]
            })
        })
    }

    /// Mean of the non-negative estimator `r − ln r − 1`, `r = exp(ref_i − logp_i)`,
    /// of `KL(policy ∥ reference)` at the sampled tokens.
    pub fn kl_estimate(&self, logp: Var, ref_logp: &[f64]) -> Result<Var> {
        let lv = self.value(logp);
        let n = lv.numel();
        if ref_logp.len() != n || n == 0 {
            return Err(shape_err!("kl estimate over {n} tokens with {} refs", ref_logp.len()));
        }
        let ratios: Vec<f64> = lv.data().iter().zip(ref_logp).map(|(l, r)| (r - l).exp()).collect();
        let total: f64 = ratios.iter().map(|r| r - r.ln() - 1.0).sum();
        self.record("kl_estimate", Tensor::scalar(total / n as f64), &[logp], || {
            Box::new(move |g| {
                let s = g.data()[0] / n as f64;
                vec![Some(Tensor::vector(ratios.iter().map(|r| s * (1.0 - r)).collect()))]
            })
        })
    }

    /// Scores `scale · ⟨rope(q_i, dist[i][j]), k_j⟩` for `q [t,d]`, `k [s,d]`,
    /// where `dist` is the row-major `t×s` matrix of relative distances.
    ///
    /// Rotating the query by the relative distance is the same as rotating
    /// query and key by their absolute positions, which lets callers remap
    /// distances (chunked attention) without touching cached keys.
    pub fn rope_scores(&self, q: Var, k: Var, rot: &RotaryTable, dist: &[i64], scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.rank() != 2 || kv.rank() != 2 || qv.shape()[1] != kv.shape()[1] {
            return Err(shape_err!("rope_scores q {:?} k {:?}", qv.shape(), kv.shape()));
        }
        let (t, s, d) = (qv.shape()[0], kv.shape()[0], qv.shape()[1]);
        if d != 2 * rot.half_dim() {
            return Err(shape_err!("rope table for dim {} used with dim {d}", 2 * rot.half_dim()));
        }
        if dist.len() != t * s {
            return Err(shape_err!("{} distances for {t}×{s} scores", dist.len()));
        }
        let mut out = vec![0.0; t * s];
        for i in 0..t {
            let qi = qv.row(i);
            for j in 0..s {
                let (cos, sin) = rot.get(dist[i * s + j])?;
                let kj = kv.row(j);
                let mut acc = 0.0;
                for p in 0..cos.len() {
                    let (q0, q1, k0, k1) = (qi[2 * p], qi[2 * p + 1], kj[2 * p], kj[2 * p + 1]);
                    acc += cos[p] * (q0 * k0 + q1 * k1) + sin[p] * (q0 * k1 - q1 * k0);
                }
                out[i * s + j] = scale * acc;
            }
        }
        let rot = rot.clone();
        let dist = dist.to_vec();
        self.record("rope_scores", Tensor::from_parts(vec![t, s], out), &[q, k], || {
            Box::new(move |g| {
                let mut dq = Tensor::zeros(&[t, d]);
                let mut dk = Tensor::zeros(&[s, d]);
                for i in 0..t {
                    for j in 0..s {
                        let gij = scale * g.data()[i * s + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let (cos, sin) = rot.get(dist[i * s + j]).unwrap();
                        let (qi, kj) = (qv.row(i), kv.row(j));
                        let dqi = &mut dq.data_mut()[i * d..(i + 1) * d];
                        for p in 0..cos.len() {
                            let (c, sn) = (cos[p], sin[p]);
                            dqi[2 * p] += gij * (c * kj[2 * p] + sn * kj[2 * p + 1]);
                            dqi[2 * p + 1] += gij * (c * kj[2 * p + 1] - sn * kj[2 * p]);
                        }
                        let dkj = &mut dk.data_mut()[j * d..(j + 1) * d];
                        for p in 0..cos.len() {
                            let (c, sn) = (cos[p], sin[p]);
                            dkj[2 * p] += gij * (c * qi[2 * p] - sn * qi[2 * p + 1]);
                            dkj[2 * p + 1] += gij * (c * qi[2 * p + 1] + sn * qi[2 * p]);
                        }
                    }
                }
                vec![Some(dq), Some(dk)]
            })
        })
    }
}

/// `Σ_rows Σ_v p·(ln p − log_q)`, with `0·ln 0 = 0`.
pub(crate) fn kl_rows(p: &Tensor, log_q: &Tensor) -> f64 {
    p.data()
        .iter()
        .zip(log_q.data())
        .map(|(&pv, &lq)| if pv > 0.0 { pv * (pv.ln() - lq) } else { 0.0 })
        .sum()
}

/// Precomputed `cos/sin(distance · freq_p)` for a contiguous range of integer
/// distances.
#[derive(Clone)]
pub struct RotaryTable {
    inner: Arc<RotaryInner>,
}

struct RotaryInner {
    min_dist: i64,
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RotaryTable {
    pub fn new(freqs: &[f64], min_dist: i64, max_dist: i64) -> Self {
        let half = freqs.len();
        let span = (max_dist - min_dist + 1).max(0) as usize;
        let mut cos = Vec::with_capacity(span * half);
        let mut sin = Vec::with_capacity(span * half);
        for dist in min_dist..=max_dist {
            for &f in freqs {
                let angle = dist as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { inner: Arc::new(RotaryInner { min_dist, half, cos, sin }) }
    }

    pub fn half_dim(&self) -> usize {
        self.inner.half
    }

    fn get(&self, dist: i64) -> Result<(&[f64], &[f64])> {
        let inner = &*self.inner;
        let off = dist - inner.min_dist;
        let h = inner.half;
        if off < 0 || (off as usize + 1) * h > inner.cos.len() {
            return Err(Error::Index(format!("distance {dist} outside rotary table")));
        }
        let o = off as usize * h;
        Ok((&inner.cos[o..o + h], &inner.sin[o..o + h]))
    }
}
