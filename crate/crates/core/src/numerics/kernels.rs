//! Forward kernels over plain tensors. The tape reuses these for its forward
//! pass, so inference without gradients runs the exact same arithmetic.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_RMS_EPS: f64 = 1e-6;

fn require_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(shape_err!("{what}: expected rank {rank}, got shape {:?}", t.shape()));
    }
    Ok(())
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank(a, 2, "matmul lhs")?;
    require_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(shape_err!("matmul inner extents {:?} × {:?}", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    require_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Root-mean-square normalization over the last axis, scaled by `gain`.
pub fn rmsnorm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if x.rank() == 0 || d == 0 {
        return Err(shape_err!("rmsnorm over empty last axis {:?}", x.shape()));
    }
    if gain.shape() != [d] {
        return Err(shape_err!("rmsnorm gain {:?} for last axis {d}", gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("rmsnorm eps must be positive, got {eps}")));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let inv = 1.0 / rms(row, eps);
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= inv * g;
        }
    }
    Ok(out)
}

pub(crate) fn rms(row: &[f64], eps: f64) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + eps).sqrt()
}

/// Softmax over the last axis. Entries where `mask` is `false` get probability 0.
pub fn softmax_masked(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let n = x.last_dim();
    if n == 0 {
        return Err(shape_err!("softmax over empty axis"));
    }
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(shape_err!("softmax mask length {} for {} values", m.len(), x.numel()));
        }
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let keep = mask.map(|m| &m[r * n..(r + 1) * n]);
        let row = out.row_mut(r);
        let allowed = |j: usize| keep.is_none_or(|k| k[j]);
        let mx = (0..n)
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return Err(Error::Contract(format!("softmax row {r} is fully masked")));
        }
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if allowed(j) { (*v - mx).exp() } else { 0.0 };
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out.ensure_finite("softmax")?;
    Ok(out)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    softmax_masked(x, None)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    if n == 0 {
        return Err(shape_err!("log_softmax over empty axis"));
    }
    x.ensure_finite("log_softmax")?;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let lse = logsumexp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|z| z * sigmoid(z))
}

/// `(silu(x·W_gate) ⊙ (x·W_up)) · W_down` over the last axis of `x`. No biases.
pub fn swiglu_ffn(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    let flat = x.reshape(&[x.numel() / d.max(1), d])?;
    let gate = silu(&matmul(&flat, w_gate)?);
    let up = matmul(&flat, w_up)?;
    let hidden = gate.zip_map(&up, |a, b| a * b)?;
    let y = matmul(&hidden, w_down)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = y.last_dim();
    y.reshape(&shape)
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits [t,V]`.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    check_targets(logits, targets)?;
    logits.ensure_finite("cross_entropy")?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = logits.row(t);
            logsumexp(row) - row[y as usize]
        })
        .sum();
    Ok(total / targets.len() as f64)
}

pub(crate) fn check_targets(logits: &Tensor, targets: &[u32]) -> Result<()> {
    if logits.rank() != 2 {
        return Err(shape_err!("logits must be [t,V], got {:?}", logits.shape()));
    }
    let (t, v) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != t {
        return Err(shape_err!("{} targets for {t} logit rows", targets.len()));
    }
    if t == 0 {
        return Err(shape_err!("empty target list"));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y as usize >= v) {
        return Err(Error::Index(format!("target id {bad} outside vocabulary of {v}")));
    }
    Ok(())
}
