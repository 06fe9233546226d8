use super::{logit_scale, rope_frequencies, AttnConfig, DcaMap, LayerKv};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{RotaryTable, Tape, Var};

/// Per-query-head attention probabilities `[t, s]`, for inspection.
pub struct AttentionTrace {
    pub probs: Vec<Var>,
    /// Effective relative distance for every allowed (query, key) pair.
    pub distances: Vec<Option<i64>>,
}

#[derive(Clone, Copy, Debug)]
enum Scheme {
    Plain,
    Chunked(DcaMap),
}

/// Grouped-query attention over the cache plus `new_k`/`new_v`, with plain RoPE.
///
/// `q` is `[t, Hq·d]` and `new_k`, `new_v` are `[t, Hkv·d]`, already passed
/// through QK-Norm but not rotated. The new keys and values are appended to
/// `cache`; query `i` sits at position `past_len + i`.
pub fn gqa_attend(tape: &Tape, cfg: &AttnConfig, cache: &mut LayerKv, q: Var, new_k: Var, new_v: Var, causal: bool) -> Result<Var> {
    attend(tape, cfg, cache, q, new_k, new_v, causal, Scheme::Plain).map(|(out, _)| out)
}

/// [`gqa_attend`] with relative distances remapped by dual chunk attention.
/// Always causal.
pub fn dca_attend(tape: &Tape, cfg: &AttnConfig, cache: &mut LayerKv, q: Var, new_k: Var, new_v: Var) -> Result<Var> {
    let map = dca_map(cfg)?;
    attend(tape, cfg, cache, q, new_k, new_v, true, Scheme::Chunked(map)).map(|(out, _)| out)
}

/// Like [`gqa_attend`] / [`dca_attend`] (chosen by `chunked`), also returning
/// the attention probabilities.
#[allow(clippy::too_many_arguments)]
pub fn gqa_attend_traced(
    tape: &Tape,
    cfg: &AttnConfig,
    cache: &mut LayerKv,
    q: Var,
    new_k: Var,
    new_v: Var,
    causal: bool,
    chunked: bool,
) -> Result<(Var, AttentionTrace)> {
    let scheme = if chunked { Scheme::Chunked(dca_map(cfg)?) } else { Scheme::Plain };
    attend(tape, cfg, cache, q, new_k, new_v, causal, scheme)
}

fn dca_map(cfg: &AttnConfig) -> Result<DcaMap> {
    let chunk = cfg
        .dca_chunk
        .ok_or_else(|| Error::Config("dual chunk attention requested without a chunk size".into()))?;
    DcaMap::new(chunk, cfg.max_position)
}

#[allow(clippy::too_many_arguments)]
fn attend(
    tape: &Tape,
    cfg: &AttnConfig,
    cache: &mut LayerKv,
    q: Var,
    new_k: Var,
    new_v: Var,
    causal: bool,
    scheme: Scheme,
) -> Result<(Var, AttentionTrace)> {
    let hd = cfg.head_dim;
    let (q_shape, k_shape, v_shape) = (tape.shape(q), tape.shape(new_k), tape.shape(new_v));
    if q_shape.len() != 2 || q_shape[1] != cfg.q_width() {
        return Err(shape_err!("queries {:?} for {} heads of {hd}", q_shape, cfg.n_heads_q));
    }
    let t = q_shape[0];
    if k_shape != [t, cfg.kv_width()] || v_shape != k_shape {
        return Err(shape_err!("new keys {:?} / values {:?} for {t} queries", k_shape, v_shape));
    }
    if cache.width() != cfg.kv_width() {
        return Err(shape_err!("cache width {} vs kv width {}", cache.width(), cfg.kv_width()));
    }
    if matches!(scheme, Scheme::Chunked(_)) && !causal {
        return Err(Error::Contract("dual chunk attention is causal only".into()));
    }

    let past = cache.len();
    let s = past + t;
    let (keys, values) = if past > 0 {
        let ck = tape.constant(cache.keys());
        let cv = tape.constant(cache.values());
        (tape.concat_rows(&[ck, new_k])?, tape.concat_rows(&[cv, new_v])?)
    } else {
        (new_k, new_v)
    };
    cache.append(&tape.value(new_k), &tape.value(new_v))?;

    let mut mask = Vec::with_capacity(t * s);
    let mut dist = Vec::with_capacity(t * s);
    let mut distances = Vec::with_capacity(t * s);
    for i in 0..t {
        let qpos = past + i;
        for j in 0..s {
            let allowed = !causal || j <= qpos;
            let d = match (allowed, scheme) {
                (false, _) => None,
                (true, Scheme::Plain) => Some(qpos as i64 - j as i64),
                (true, Scheme::Chunked(m)) => Some(m.effective_distance(qpos, j)? as i64),
            };
            mask.push(allowed);
            dist.push(d.unwrap_or(0));
            distances.push(d);
        }
    }
    let lo = dist.iter().copied().min().unwrap_or(0);
    let hi = dist.iter().copied().max().unwrap_or(0);
    let freqs = rope_frequencies(cfg);
    let table = RotaryTable::new(freqs.data(), lo, hi);
    let scale = logit_scale(cfg);

    let mut kv_heads = Vec::with_capacity(cfg.n_heads_kv);
    for g in 0..cfg.n_heads_kv {
        kv_heads.push((tape.slice_cols(keys, g * hd, hd)?, tape.slice_cols(values, g * hd, hd)?));
    }
    let mut outs = Vec::with_capacity(cfg.n_heads_q);
    let mut probs = Vec::with_capacity(cfg.n_heads_q);
    for h in 0..cfg.n_heads_q {
        let (kg, vg) = kv_heads[cfg.kv_head_for(h)];
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let scores = tape.rope_scores(qh, kg, &table, &dist, scale)?;
        let p = tape.softmax_masked(scores, Some(&mask))?;
        outs.push(tape.matmul(p, vg)?);
        probs.push(p);
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, AttentionTrace { probs, distances }))
}

/// Projection and QK-Norm weights of one attention block, bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub q_norm: Var,
    pub k_norm: Var,
}

/// Full attention block on `x [t, d_model]`: bias-free projections, QK-Norm
/// (shared per-dimension gain, applied before rotation), positional attention
/// (chunked when `cfg.dca_chunk` is set) and the output projection.
pub fn self_attention(
    tape: &Tape,
    cfg: &AttnConfig,
    p: &SelfAttentionParams,
    x: Var,
    cache: &mut LayerKv,
    eps: f64,
) -> Result<Var> {
    let t = tape.shape(x)[0];
    let hd = cfg.head_dim;
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let q = qk_norm(tape, q, p.q_norm, t, cfg.n_heads_q, hd, eps)?;
    let k = qk_norm(tape, k, p.k_norm, t, cfg.n_heads_kv, hd, eps)?;
    let out = match cfg.dca_chunk {
        Some(_) => dca_attend(tape, cfg, cache, q, k, v)?,
        None => gqa_attend(tape, cfg, cache, q, k, v, true)?,
    };
    tape.matmul(out, p.wo)
}

fn qk_norm(tape: &Tape, x: Var, gain: Var, t: usize, heads: usize, hd: usize, eps: f64) -> Result<Var> {
    let per_head = tape.reshape(x, &[t, heads, hd])?;
    let normed = tape.rmsnorm(per_head, gain, eps)?;
    tape.reshape(normed, &[t, heads * hd])
}
