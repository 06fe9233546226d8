//! GQA against a plain multi-head oracle, cached decode, and the long-context
//! no-op and boundedness checks.

use q3dk::attention::{dca_attend, gqa_attend, gqa_attend_traced, logit_scale, rope_frequencies, AttnConfig, DcaMap, LayerKv};
use q3dk::model::{preset, Model, ModelConfig};
use q3dk::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, ok, tol, Outcome};

fn cfg(hq: usize, hkv: usize, hd: usize) -> AttnConfig {
    AttnConfig {
        n_heads_q: hq,
        n_heads_kv: hkv,
        head_dim: hd,
        rope_base: 1e6,
        yarn_scale: 1.0,
        dca_chunk: None,
        max_position: 4096,
    }
}

fn rotate(x: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = x.len();
    let mut out = x.to_vec();
    for i in 0..d / 2 {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

/// Multi-head attention with absolute-position RoPE; query head `h` reads
/// key/value head `h / (hq / hkv)`. Queries sit at `past..past + t`.
fn oracle(q: &Tensor, k: &Tensor, v: &Tensor, past: usize, c: &AttnConfig, causal: bool) -> Tensor {
    let (t, s, d) = (q.rows(), k.rows(), c.head_dim);
    let group = c.n_heads_q / c.n_heads_kv;
    let mut out = vec![0.0; t * c.n_heads_q * d];
    for h in 0..c.n_heads_q {
        let g = h / group;
        for i in 0..t {
            let qpos = past + i;
            let qi = rotate(&q.row(i)[h * d..(h + 1) * d], qpos, c.rope_base);
            let visible = if causal { qpos + 1 } else { s };
            let scores: Vec<f64> = (0..visible)
                .map(|j| {
                    let kj = rotate(&k.row(j)[g * d..(g + 1) * d], j, c.rope_base);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                for e in 0..d {
                    out[(i * c.n_heads_q + h) * d + e] += wj / z * v.row(j)[g * d + e];
                }
            }
        }
    }
    Tensor::new(vec![t, c.n_heads_q * d], out).unwrap()
}

/// Runs `gqa_attend` (or `dca_attend`) on a cache preloaded with the first
/// `past` rows of `k`/`v`.
fn library(q: &Tensor, k: &Tensor, v: &Tensor, past: usize, c: &AttnConfig, causal: bool, chunked: bool) -> q3dk::Result<Tensor> {
    let tape = Tape::new();
    let mut cache = LayerKv::new(c.kv_width());
    let s = k.rows();
    if past > 0 {
        let rows = |x: &Tensor, a: usize, b: usize| Tensor::new(vec![b - a, x.last_dim()], x.data()[a * x.last_dim()..b * x.last_dim()].to_vec()).unwrap();
        cache.append(&rows(k, 0, past), &rows(v, 0, past))?;
    }
    let tail = |x: &Tensor| Tensor::new(vec![s - past, x.last_dim()], x.data()[past * x.last_dim()..].to_vec()).unwrap();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(tail(k)), tape.constant(tail(v)));
    let out = if chunked {
        dca_attend(&tape, c, &mut cache, qv, kv, vv)?
    } else {
        gqa_attend(&tape, c, &mut cache, qv, kv, vv, causal)?
    };
    Ok((*tape.value(out)).clone())
}

fn random_qkv(rng: &mut ChaCha8Rng, c: &AttnConfig, t: usize, s: usize) -> (Tensor, Tensor, Tensor) {
    (
        Tensor::randn(&[t, c.q_width()], 1.0, rng),
        Tensor::randn(&[s, c.kv_width()], 1.0, rng),
        Tensor::randn(&[s, c.kv_width()], 1.0, rng),
    )
}

/// (a) GQA with `Hq = Hkv` (and, beyond the criterion, shared heads) matches
/// the oracle.
fn mha_oracle() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let h = [1, 2, 4][case % 3];
        let hq = if case % 4 == 3 { 2 * h } else { h };
        let c = cfg(hq, h, 8);
        let t = rng.random_range(1..6);
        let past = rng.random_range(0..6);
        let causal = !(past == 0 && case % 5 == 0);
        let (q, k, v) = random_qkv(&mut rng, &c, t, past + t);
        let got = ok(library(&q, &k, &v, past, &c, causal, false))?;
        let err = got.max_abs_diff(&oracle(&q, &k, &v, past, &c, causal));
        ensure!(err <= tol::EXACT, "case {case} ({hq}/{h} heads, past {past}): {err:.2e}");
        worst = worst.max(err);
    }
    Ok(worst)
}

fn last_row(t: &Tensor) -> &[f64] {
    t.row(t.rows() - 1)
}

/// (b) Token-by-token decode against a full recompute of every prefix up to
/// 64 tokens.
fn incremental(config: ModelConfig, label: &str) -> Result<f64, String> {
    let model = ok(Model::init(config, 31))?;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let ids: Vec<u32> = (0..64).map(|_| rng.random_range(0..model.config().vocab_size as u32)).collect();
    let mut cache = model.new_cache();
    let mut worst: f64 = 0.0;
    for n in 1..=ids.len() {
        let step = ok(model.forward(&ids[n - 1..n], &mut cache))?;
        let full = ok(model.forward(&ids[..n], &mut model.new_cache()))?;
        let err = step.row(0).iter().zip(last_row(&full)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(err <= tol::DECODE, "{label}: prefix {n} differs by {err:.2e}");
        worst = worst.max(err);
    }
    Ok(worst)
}

/// A toy trained on 16 positions, extended four-fold so 64 tokens cross
/// several chunks.
fn long_toy() -> ModelConfig {
    let mut c = preset("qwen3-8b-toy").unwrap();
    c.attn.max_position = 16;
    c.max_context = 16;
    c.extend_context(4)
}

/// (c) YARN at scale 1 and DCA on sequences that fit one chunk change
/// nothing.
fn no_ops() -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let c = cfg(4, 2, 8);
    let freqs = rope_frequencies(&c);
    for (i, f) in freqs.data().iter().enumerate() {
        let want = c.rope_base.powf(-2.0 * i as f64 / c.head_dim as f64);
        ensure!((f - want).abs() <= tol::EXACT * want, "yarn 1 frequency {i}: {f} vs {want}");
    }
    ensure!(
        (logit_scale(&c) - 1.0 / (c.head_dim as f64).sqrt()).abs() <= tol::EXACT,
        "yarn 1 changes the logit scale"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let chunk = 12;
    let chunked = AttnConfig { dca_chunk: Some(chunk), max_position: 16, ..c.clone() };
    for s in 1..=chunk {
        let past = rng.random_range(0..s);
        let (q, k, v) = random_qkv(&mut rng, &c, s - past, s);
        let plain = ok(library(&q, &k, &v, past, &c, true, false))?;
        let dca = ok(library(&q, &k, &v, past, &chunked, true, true))?;
        let err = plain.max_abs_diff(&dca);
        ensure!(err <= tol::EXACT, "dca at length {s} differs by {err:.2e}");
        worst = worst.max(err);
    }

    let base = preset("qwen3-8b-toy").unwrap();
    let with_dca = ModelConfig { attn: AttnConfig { dca_chunk: Some(24), max_position: 32, ..base.attn.clone() }, ..base.clone() };
    let a = ok(Model::init(base, 34))?;
    let b = ok(Model::new(with_dca, a.weights().clone()))?;
    let ids: Vec<u32> = (0..24).map(|_| rng.random_range(0..a.config().vocab_size as u32)).collect();
    let la = ok(a.forward(&ids, &mut a.new_cache()))?;
    let lb = ok(b.forward(&ids, &mut b.new_cache()))?;
    let err = la.max_abs_diff(&lb);
    ensure!(err <= tol::EXACT, "model with dca differs within one chunk by {err:.2e}");
    Ok(worst.max(err))
}

/// (d) Every effective distance at four chunks of sequence stays within the
/// trained window, by exhaustive scan and in the attention trace.
fn dca_bounded() -> Result<usize, String> {
    let mut pairs = 0;
    for (chunk, max_position) in [(1, 8), (3, 4), (12, 16), (48, 64), (64, 64), (24_576, 32_768)] {
        let m = ok(DcaMap::new(chunk, max_position))?;
        let seq = 4 * chunk;
        let stride = if seq > 4096 { 97 } else { 1 };
        for q in (0..seq).step_by(stride).chain([seq - 1]) {
            for k in 0..=q {
                let d = ok(m.effective_distance(q, k))?;
                ensure!(d <= max_position, "chunk {chunk}: pair ({q},{k}) maps to {d} > {max_position}");
                pairs += 1;
            }
        }
    }

    let c = AttnConfig { dca_chunk: Some(12), max_position: 16, ..cfg(2, 1, 8) };
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let (q, k, v) = random_qkv(&mut rng, &c, 48, 48);
    let tape = Tape::new();
    let mut cache = LayerKv::new(c.kv_width());
    let (_, trace) = ok(gqa_attend_traced(
        &tape,
        &c,
        &mut cache,
        tape.constant(q),
        tape.constant(k),
        tape.constant(v),
        true,
        true,
    ))?;
    let far = trace.distances.iter().flatten().copied().max().unwrap_or(0);
    ensure!(far as usize <= c.max_position, "attention used distance {far}");
    Ok(pairs)
}

pub fn run() -> Outcome {
    let a = mha_oracle()?;
    let mut b: f64 = 0.0;
    for (name, c) in [
        ("0.6b-toy", preset("qwen3-0.6b-toy").unwrap()),
        ("8b-toy", preset("qwen3-8b-toy").unwrap()),
        ("moe-toy", preset("qwen3-moe-toy").unwrap()),
        ("yarn+dca toy", long_toy()),
    ] {
        b = b.max(incremental(c, name)?);
    }
    let c = no_ops()?;
    let pairs = dca_bounded()?;
    Ok(format!(
        "(a) oracle {a:.1e}; (b) decode {b:.1e} over prefixes 1..=64, 4 configs; (c) no-ops {c:.1e}; (d) {pairs} pairs bounded"
    ))
}
