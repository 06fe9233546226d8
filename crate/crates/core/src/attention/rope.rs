use std::f64::consts::PI;

use super::AttnConfig;
use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// Wavelength ratio (context / wavelength) below which a dimension is fully
/// interpolated.
pub const YARN_BETA_SLOW: f64 = 1.0;
/// Wavelength ratio above which a dimension is left untouched.
pub const YARN_BETA_FAST: f64 = 32.0;

/// Per-pair rotation frequencies `base^(−2i/d)`, adjusted by YARN's
/// NTK-by-parts rule when `yarn_scale > 1`.
pub fn rope_frequencies(cfg: &AttnConfig) -> Tensor {
    let d = cfg.head_dim as f64;
    let s = cfg.yarn_scale;
    let ctx = cfg.max_position as f64;
    let freqs = (0..cfg.head_dim / 2)
        .map(|i| {
            let f = cfg.rope_base.powf(-2.0 * i as f64 / d);
            if s <= 1.0 {
                return f;
            }
            let ratio = ctx * f / (2.0 * PI);
            let keep = ((ratio - YARN_BETA_SLOW) / (YARN_BETA_FAST - YARN_BETA_SLOW)).clamp(0.0, 1.0);
            (1.0 - keep) * f / s + keep * f
        })
        .collect();
    Tensor::vector(freqs)
}

/// YARN's magnitude correction `0.1·ln(s) + 1` (1 when YARN is off).
pub fn yarn_mscale(cfg: &AttnConfig) -> f64 {
    if cfg.yarn_scale <= 1.0 {
        1.0
    } else {
        0.1 * cfg.yarn_scale.ln() + 1.0
    }
}

/// Multiplier on `q·k`: `1/√d`, times `mscale²` because the correction
/// applies to both queries and keys.
pub fn logit_scale(cfg: &AttnConfig) -> f64 {
    let m = yarn_mscale(cfg);
    m * m / (cfg.head_dim as f64).sqrt()
}

/// Rotates each `(2i, 2i+1)` pair of `x [t,h,d]` by `positions[t]·freqs[i]`.
pub fn apply_rope(x: &Tensor, positions: &[usize], freqs: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(shape_err!("apply_rope expects [t,h,d], got {:?}", x.shape()));
    }
    let (t, h, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if positions.len() != t || freqs.numel() * 2 != d {
        return Err(shape_err!(
            "apply_rope: {} positions, {} freqs for {:?}",
            positions.len(),
            freqs.numel(),
            x.shape()
        ));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for (ti, &pos) in positions.iter().enumerate() {
        for (i, &f) in freqs.data().iter().enumerate() {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            for hi in 0..h {
                let base = (ti * h + hi) * d + 2 * i;
                let (a, b) = (data[base], data[base + 1]);
                data[base] = a * cos - b * sin;
                data[base + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}
