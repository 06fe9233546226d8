//! SFT, distillation and GRPO smoke runs on toy models.

use std::time::Instant;

use q3dk::chat_template::{ChatMessage, Mode};
use q3dk::generation::GenerationParams;
use q3dk::model::{preset, Model};
use q3dk::numerics::{kernels, Tape};
use q3dk::tokenizer::{Vocab, DEFAULT_SPECIALS};
use q3dk::training::{
    distill_eval, group_advantages, grpo_step, offpolicy_distill_dataset, onpolicy_distill_step, sample_group,
    sft_eval, AdamWConfig, DistillPrompt, GrpoConfig, KlDirection, OptimState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::{chat_vocab, distill_prompts, sft_example, toy_model, train_sft, transcript, Problem};
use crate::{ensure, ok, tol, Outcome};

fn timed<T>(label: &str, f: impl FnOnce() -> Result<T, String>) -> Result<(T, f64), String> {
    let start = Instant::now();
    let out = f()?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < tol::SMOKE_SECONDS, "{label} took {secs:.0}s");
    Ok((out, secs))
}

/// A two-layer toy memorizes one short transcript.
fn sft_memorize() -> Result<f64, String> {
    let vocab = Vocab::bytes_only(&DEFAULT_SPECIALS);
    let t = [ChatMessage::user("2+2? /no_think"), ChatMessage::assistant(None, "4")];
    let ex = sft_example(&vocab, &t);
    let mut model = toy_model(&vocab, 2, 91);
    train_sft(&mut model, std::slice::from_ref(&ex), 200, 1, 1e-2);
    let loss = ok(sft_eval(&model, &[ex]))?.loss;
    ensure!(loss < tol::SFT_LOSS, "memorization loss {loss:.4}");
    Ok(loss)
}

/// A student identical to its teacher sits at KL 0 with zero gradient.
fn distill_fixed_point() -> Result<f64, String> {
    let vocab = Vocab::bytes_only(&DEFAULT_SPECIALS);
    let teacher = toy_model(&vocab, 2, 92);
    let mut student = teacher.clone();
    let prompts = [
        DistillPrompt { messages: vec![ChatMessage::user("hello")], mode: Mode::Thinking },
        DistillPrompt { messages: vec![ChatMessage::user("bye")], mode: Mode::NonThinking },
    ];
    let params = GenerationParams { max_new_tokens: 12, ..GenerationParams::thinking() };
    let mut opt = ok(OptimState::new(AdamWConfig::default()))?;
    let report = ok(onpolicy_distill_step(&mut student, &teacher, &vocab, &prompts, &params, KlDirection::TeacherToStudent, &mut opt))?;
    ensure!(report.kl.abs() <= tol::IDENTITY, "self-distillation KL {}", report.kl);

    let ids: Vec<u32> = vocab.encode_str("<|im_start|>user\nhello<|im_end|>\n", true);
    let tape = Tape::new();
    let bound = teacher.bind(&tape, true);
    let out = ok(teacher.forward_on(&tape, &bound, &ids, &mut teacher.new_cache()))?;
    let target = ok(kernels::softmax(&tape.value(out.logits)))?;
    let kl = ok(tape.kl_teacher_student(out.logits, &target))?;
    let grads = ok(tape.backward(kl))?;
    let worst = bound
        .iter()
        .filter_map(|(_, v)| grads.get(v))
        .flat_map(|g| g.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    ensure!(worst <= tol::IDENTITY, "gradient at the fixed point is {worst:.2e}");
    Ok(report.kl.abs().max(worst))
}

/// Every sum of two digits, in both modes.
fn all_problems() -> Vec<Problem> {
    (0..10)
        .flat_map(|a| {
            (0..10).map(move |b| Problem {
                question: format!("add {a} {b}"),
                thinking: format!("{a} plus {b} is {}", a + b),
                answer: format!("{}", a + b),
            })
        })
        .collect()
}

pub struct DistillOutcome {
    pub kl_before: f64,
    pub kl_after: f64,
    pub agreement: f64,
}

/// A two-layer teacher trained on the sums task; a one-layer student learns
/// from it purely on-policy. Held out: fresh greedy teacher continuations.
fn distill_on_policy() -> Result<DistillOutcome, String> {
    let problems = all_problems();
    let transcripts: Vec<_> = [Mode::Thinking, Mode::NonThinking]
        .into_iter()
        .flat_map(|m| problems.iter().map(move |p| transcript(p, m)))
        .collect();
    let vocab = chat_vocab(&transcripts, 300);
    let examples: Vec<_> = transcripts.iter().map(|t| sft_example(&vocab, t)).collect();
    let mut teacher = toy_model(&vocab, 2, 3);
    train_sft(&mut teacher, &examples, 400, 8, 1e-2);

    let mut prompts = distill_prompts(&problems);
    let flipped: Vec<DistillPrompt> = prompts
        .iter()
        .map(|p| DistillPrompt { mode: if p.mode == Mode::Thinking { Mode::NonThinking } else { Mode::Thinking }, ..p.clone() })
        .collect();
    prompts.extend(flipped);
    let held_prompts: Vec<DistillPrompt> = (0..32).map(|i| prompts[(i * 37) % prompts.len()].clone()).collect();
    let greedy = GenerationParams { max_new_tokens: 32, ..GenerationParams::greedy() };
    let held = ok(offpolicy_distill_dataset(&teacher, &vocab, &held_prompts, &greedy))?.examples;
    ensure!(held.len() >= 24, "only {} held-out sequences survived", held.len());

    let mut student = toy_model(&vocab, 1, 4);
    let before = ok(distill_eval(&student, &teacher, &held))?;
    let mut opt = ok(OptimState::new(AdamWConfig { lr: 3e-3, ..AdamWConfig::default() }))?;
    let batch = 8;
    for step in 0..1000 {
        let chosen: Vec<DistillPrompt> = (0..batch).map(|i| prompts[(step * batch + i) * 7919 % prompts.len()].clone()).collect();
        let params = GenerationParams {
            temperature: 1.0,
            top_p: 1.0,
            top_k: None,
            max_new_tokens: 32,
            seed: step as u64,
            ..GenerationParams::thinking()
        };
        ok(onpolicy_distill_step(&mut student, &teacher, &vocab, &chosen, &params, KlDirection::TeacherToStudent, &mut opt))?;
    }
    let after = ok(distill_eval(&student, &teacher, &held))?;
    let out = DistillOutcome { kl_before: before.mean_kl, kl_after: after.mean_kl, agreement: after.argmax_agreement };
    ensure!(
        out.kl_after <= (1.0 - tol::DISTILL_KL_DROP) * out.kl_before,
        "held-out KL went {:.3} -> {:.3}",
        out.kl_before,
        out.kl_after
    );
    ensure!(out.agreement >= tol::DISTILL_AGREEMENT, "argmax agreement {:.3}", out.agreement);
    Ok(out)
}

/// Two-armed bandit: one prompt token, a one-token answer, reward 1 for the
/// arm the initial policy disfavours.
fn bandit() -> Result<f64, String> {
    let mut cfg = preset("qwen3-0.6b-toy").unwrap().with_vocab(2);
    cfg.n_layers = 1;
    let mut policy = ok(Model::init(cfg, 5))?;
    let reference = policy.clone();
    let p_one = |m: &Model| -> Result<f64, String> {
        let l = ok(m.forward(&[0], &mut m.new_cache()))?;
        Ok(1.0 / (1.0 + (l.row(0)[0] - l.row(0)[1]).exp()))
    };
    let good: u32 = if p_one(&policy)? > 0.5 { 0 } else { 1 };
    let p_good = |m: &Model| p_one(m).map(|p| if good == 1 { p } else { 1.0 - p });
    let start = p_good(&policy)?;
    let mut opt = ok(OptimState::new(AdamWConfig::default()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(93);
    for _ in 0..200 {
        let g = ok(sample_group(&policy, &[0], 8, 1, None, &mut rng, &mut |r: &[u32]| (r[0] == good) as u8 as f64))?;
        ok(grpo_step(&mut policy, &reference, &[g], &GrpoConfig::default(), &mut opt))?;
    }
    let end = p_good(&policy)?;
    ensure!(end > tol::BANDIT_P, "P(correct) went {start:.3} -> {end:.3}");
    Ok(end)
}

fn advantages() -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(94);
    let mut groups = 0;
    for _ in 0..500 {
        let g = rng.random_range(2..17);
        let rewards: Vec<f64> = (0..g)
            .map(|_| if rng.random_bool(0.3) { rng.random_range(0..3) as f64 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let Some(a) = group_advantages(&rewards) else { continue };
        let mean = rewards.iter().sum::<f64>() / g as f64;
        let spread = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        if spread < 0.1 {
            continue;
        }
        let n = a.len() as f64;
        let sum: f64 = a.iter().sum();
        let var = a.iter().map(|x| x * x).sum::<f64>() / n - (sum / n).powi(2);
        ensure!(sum.abs() <= 1e-9, "advantages sum to {sum:e} for {rewards:?}");
        ensure!((var - 1.0).abs() <= tol::UNIT_VAR, "advantage variance {var} for {rewards:?}");
        groups += 1;
    }
    ensure!(group_advantages(&[0.5; 6]).is_none(), "constant rewards produced advantages");
    Ok(groups)
}

pub fn run() -> Outcome {
    let (sft, t1) = timed("sft", sft_memorize)?;
    let (fixed, t2) = timed("fixed point", distill_fixed_point)?;
    let (d, t3) = timed("distillation", distill_on_policy)?;
    let (p, t4) = timed("bandit", bandit)?;
    let groups = advantages()?;
    Ok(format!(
        "sft loss {sft:.4} ({t1:.0}s); self-distill KL/grad {fixed:.1e} ({t2:.0}s); on-policy KL {:.2} -> {:.2}, agreement {:.3} ({t3:.0}s); bandit P {p:.3} ({t4:.0}s); {groups} advantage groups zero-mean unit-variance",
        d.kl_before, d.kl_after, d.agreement
    ))
}
