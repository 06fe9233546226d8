//! Every differentiable op against central finite differences.

use std::time::Instant;

use q3dk::attention::{self_attention, AttnConfig, LayerKv, SelfAttentionParams};
use q3dk::moe::{global_balance_loss_var, moe_forward, route_var, ExpertParams, MoeConfig};
use q3dk::numerics::{kernels, swiglu_ffn_var, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, tol, Outcome};

type Build = dyn Fn(&Tape, &[Var]) -> q3dk::Result<Var>;

/// Central differences, written out here so the check does not lean on
/// library code.
fn numeric_grad(inputs: &[Tensor], which: usize, build: &Build) -> Tensor {
    let eval = |probe: &Tensor| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| tape.constant(if j == which { probe.clone() } else { t.clone() }))
            .collect();
        let out = build(&tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut probe = inputs[which].clone();
    let mut g = vec![0.0; probe.numel()];
    for (i, gi) in g.iter_mut().enumerate() {
        let x = probe.data()[i];
        probe.data_mut()[i] = x + tol::FD_STEP;
        let up = eval(&probe);
        probe.data_mut()[i] = x - tol::FD_STEP;
        let down = eval(&probe);
        probe.data_mut()[i] = x;
        *gi = (up - down) / (2.0 * tol::FD_STEP);
    }
    Tensor::new(probe.shape().to_vec(), g).unwrap()
}

/// Worst relative error over every input of one case.
fn check(inputs: &[Tensor], build: &Build) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numeric_grad(inputs, i, build);
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(tol::GRAD_FLOOR));
        }
    }
    worst
}

/// Reduces `out` to a scalar through a fixed random projection.
fn project(tape: &Tape, out: Var, r: &Tensor) -> q3dk::Result<Var> {
    let p = tape.mul_const(out, r.clone())?;
    tape.sum(p)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

struct Case {
    inputs: Vec<Tensor>,
    build: Box<Build>,
}

fn matmul_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let r = randn(rng, &[m, n]);
    Case {
        inputs: vec![randn(rng, &[m, k]), randn(rng, &[k, n])],
        build: Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, &r)
        }),
    }
}

fn rmsnorm_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, d) = (rng.random_range(1..4), rng.random_range(2..7));
    let r = randn(rng, &[m, d]);
    Case {
        inputs: vec![randn(rng, &[m, d]), randn(rng, &[d])],
        build: Box::new(move |t, v| {
            let y = t.rmsnorm(v[0], v[1], kernels::DEFAULT_RMS_EPS)?;
            project(t, y, &r)
        }),
    }
}

fn swiglu_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, d, h) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..6));
    let r = randn(rng, &[m, d]);
    Case {
        inputs: vec![randn(rng, &[m, d]), randn(rng, &[d, h]), randn(rng, &[d, h]), randn(rng, &[h, d])],
        build: Box::new(move |t, v| {
            let y = swiglu_ffn_var(t, v[0], v[1], v[2], v[3])?;
            project(t, y, &r)
        }),
    }
}

fn softmax_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = (rng.random_range(1..4), rng.random_range(2..8));
    let r = randn(rng, &[m, n]);
    Case {
        inputs: vec![Tensor::randn(&[m, n], 2.0, rng)],
        build: Box::new(move |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, &r)
        }),
    }
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = (rng.random_range(1..5), rng.random_range(2..9));
    let targets: Vec<u32> = (0..m).map(|_| rng.random_range(0..n as u32)).collect();
    Case {
        inputs: vec![Tensor::randn(&[m, n], 2.0, rng)],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
    }
}

/// Projections, QK-Norm, RoPE (plain, YARN or chunked) and a cached past.
fn attention_case(rng: &mut ChaCha8Rng) -> Case {
    let (hq, hkv) = [(1, 1), (2, 1), (2, 2), (4, 2)][rng.random_range(0..4)];
    let hd = 4;
    let d = 6;
    let long = rng.random_bool(0.5);
    let cfg = AttnConfig {
        n_heads_q: hq,
        n_heads_kv: hkv,
        head_dim: hd,
        rope_base: if long { 1e6 } else { 1e4 },
        yarn_scale: if long { 4.0 } else { 1.0 },
        dca_chunk: if long { Some(3) } else { None },
        max_position: 4,
    };
    let t = rng.random_range(1..4);
    let past = rng.random_range(0..4);
    let past_k = randn(rng, &[past, hkv * hd]);
    let past_v = randn(rng, &[past, hkv * hd]);
    let r = randn(rng, &[t, d]);
    let inputs = vec![
        randn(rng, &[t, d]),
        Tensor::randn(&[d, hq * hd], 0.5, rng),
        Tensor::randn(&[d, hkv * hd], 0.5, rng),
        Tensor::randn(&[d, hkv * hd], 0.5, rng),
        Tensor::randn(&[hq * hd, d], 0.5, rng),
        Tensor::rand_uniform(&[hd], 0.5, 1.5, rng),
        Tensor::rand_uniform(&[hd], 0.5, 1.5, rng),
    ];
    Case {
        inputs,
        build: Box::new(move |t, v| {
            let mut cache = LayerKv::new(cfg.kv_width());
            if past > 0 {
                cache.append(&past_k, &past_v)?;
            }
            let p = SelfAttentionParams { wq: v[1], wk: v[2], wv: v[3], wo: v[4], q_norm: v[5], k_norm: v[6] };
            let y = self_attention(t, &cfg, &p, v[0], &mut cache, kernels::DEFAULT_RMS_EPS)?;
            project(t, y, &r)
        }),
    }
}

/// Router probabilities whose top-k boundary is at least `margin` wide, so
/// the step cannot flip a selection.
fn clear_margin(h: &Tensor, w: &Tensor, k: usize, margin: f64) -> bool {
    let p = kernels::softmax(&kernels::matmul(h, w).unwrap()).unwrap();
    (0..p.rows()).all(|r| {
        let mut row = p.row(r).to_vec();
        row.sort_by(|a, b| b.total_cmp(a));
        row.len() == k || row[k - 1] - row[k] > margin
    })
}

/// Routed experts plus the pooled balance loss, over two micro-batches.
fn moe_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(2..5);
    let k = rng.random_range(1..=n);
    let (d, hidden) = (3, 2);
    let cfg = MoeConfig { n_experts: n, top_k: k, expert_hidden: hidden, balance_alpha: 0.5 };
    let (t1, t2) = (rng.random_range(1..4), rng.random_range(1..3));
    let (h1, h2, router) = loop {
        let h1 = randn(rng, &[t1, d]);
        let h2 = randn(rng, &[t2, d]);
        let router = randn(rng, &[d, n]);
        if clear_margin(&h1, &router, k, 1e-3) && clear_margin(&h2, &router, k, 1e-3) {
            break (h1, h2, router);
        }
    };
    let r1 = randn(rng, &[t1, d]);
    let r2 = randn(rng, &[t2, d]);
    let mut inputs = vec![h1, h2, router];
    for _ in 0..n {
        inputs.push(randn(rng, &[d, hidden]));
        inputs.push(randn(rng, &[d, hidden]));
        inputs.push(randn(rng, &[hidden, d]));
    }
    Case {
        inputs,
        build: Box::new(move |t, v| {
            let experts: Vec<ExpertParams> = (0..cfg.n_experts)
                .map(|e| ExpertParams { w_gate: v[3 + 3 * e], w_up: v[4 + 3 * e], w_down: v[5 + 3 * e] })
                .collect();
            let (rec1, p1) = route_var(t, v[0], v[2], &cfg)?;
            let (rec2, p2) = route_var(t, v[1], v[2], &cfg)?;
            let y1 = moe_forward(t, v[0], &experts, &rec1, p1)?;
            let y2 = moe_forward(t, v[1], &experts, &rec2, p2)?;
            let balance = global_balance_loss_var(t, &[p1, p2], &[rec1, rec2], &cfg)?;
            let balance = t.scale(balance, cfg.balance_alpha)?;
            let a = project(t, y1, &r1)?;
            let b = project(t, y2, &r2)?;
            let ab = t.add(a, b)?;
            t.add(ab, balance)
        }),
    }
}

fn kl_case(rng: &mut ChaCha8Rng, reverse: bool) -> Case {
    let (m, n) = (rng.random_range(1..4), rng.random_range(2..8));
    let teacher_logits = Tensor::randn(&[m, n], 2.0, rng);
    Case {
        inputs: vec![Tensor::randn(&[m, n], 2.0, rng)],
        build: Box::new(move |t, v| {
            if reverse {
                t.kl_student_teacher(v[0], &kernels::log_softmax(&teacher_logits)?)
            } else {
                t.kl_teacher_student(v[0], &kernels::softmax(&teacher_logits)?)
            }
        }),
    }
}

/// Token log-probs through the clipped surrogate plus the KL penalty, with
/// ratios kept away from the clip boundaries.
fn grpo_case(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = (rng.random_range(1..6), rng.random_range(2..6));
    let eps = 0.2;
    let logits = Tensor::randn(&[m, n], 1.5, rng);
    let targets: Vec<u32> = (0..m).map(|_| rng.random_range(0..n as u32)).collect();
    let lsm = kernels::log_softmax(&logits).unwrap();
    let mut old = Vec::with_capacity(m);
    for (i, &y) in targets.iter().enumerate() {
        let lp = lsm.row(i)[y as usize];
        let shift = loop {
            let s: f64 = rng.random_range(-0.5..0.5);
            let ratio = s.exp();
            if (ratio - (1.0 - eps)).abs() > 1e-3 && (ratio - (1.0 + eps)).abs() > 1e-3 {
                break s;
            }
        };
        old.push(lp - shift);
    }
    let adv: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let reference: Vec<f64> = old.iter().map(|o| o + rng.random_range(-0.3..0.3)).collect();
    Case {
        inputs: vec![logits],
        build: Box::new(move |t, v| {
            let lp = t.token_log_probs(v[0], &targets)?;
            let s = t.clipped_surrogate(lp, &old, &adv, eps)?;
            let kl = t.kl_estimate(lp, &reference)?;
            let kl = t.scale(kl, 0.1)?;
            t.add(s, kl)
        }),
    }
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let ops: Vec<(&str, Box<dyn Fn(&mut ChaCha8Rng) -> Case>)> = vec![
        ("matmul", Box::new(matmul_case)),
        ("rmsnorm", Box::new(rmsnorm_case)),
        ("swiglu_ffn", Box::new(swiglu_case)),
        ("softmax", Box::new(softmax_case)),
        ("cross_entropy", Box::new(cross_entropy_case)),
        ("attention", Box::new(attention_case)),
        ("moe+balance", Box::new(moe_case)),
        ("kl(t||s)", Box::new(|r: &mut ChaCha8Rng| kl_case(r, false))),
        ("kl(s||t)", Box::new(|r: &mut ChaCha8Rng| kl_case(r, true))),
        ("grpo", Box::new(grpo_case)),
    ];
    let mut summary = Vec::new();
    let mut overall: f64 = 0.0;
    for (op_index, (name, make)) in ops.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for case in 0..tol::GRAD_CASES {
            let mut rng = ChaCha8Rng::seed_from_u64((op_index * 10_000 + case) as u64);
            let c = make(&mut rng);
            let err = check(&c.inputs, &*c.build);
            ensure!(err <= tol::GRAD_REL, "{name} case {case}: relative error {err:.2e}");
            worst = worst.max(err);
        }
        overall = overall.max(worst);
        summary.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < tol::GRAD_SECONDS, "took {secs:.1}s");
    Ok(format!(
        "{} ops x {} cases, worst {overall:.1e} [{}]",
        ops.len(),
        tol::GRAD_CASES,
        summary.join(", ")
    ))
}
