//! Greedy determinism, empirical frequencies against an oracle, seeded
//! reproducibility and the preset values.

use std::collections::HashSet;

use q3dk::chat_template::{ChatMessage, Mode};
use q3dk::generation::{generate, prompt_ids, sample_next, GenerationParams, ModelSession, MAX_OUTPUT_TOKENS};
use q3dk::model::{preset, Model};
use q3dk::tokenizer::{Vocab, DEFAULT_SPECIALS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, ok, tol, Outcome};

/// Presence penalty, temperature, top-k, top-p, written out from scratch.
fn oracle(logits: &[f64], p: &GenerationParams, history: &[u32]) -> Vec<f64> {
    let adjusted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if history.contains(&(i as u32)) { l - p.presence_penalty } else { l })
        .collect();
    let z: f64 = adjusted.iter().map(|l| (l / p.temperature).exp()).sum();
    let probs: Vec<f64> = adjusted.iter().map(|l| (l / p.temperature).exp() / z).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(p.top_k.unwrap_or(order.len()));
    let kept_mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut nucleus = Vec::new();
    let mut acc = 0.0;
    for &i in &order {
        nucleus.push(i);
        acc += probs[i] / kept_mass;
        if acc >= p.top_p {
            break;
        }
    }
    let mass: f64 = nucleus.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; logits.len()];
    for i in nucleus {
        out[i] = probs[i] / mass;
    }
    out
}

fn frequencies() -> Result<usize, String> {
    let plain = GenerationParams { temperature: 1.0, top_p: 1.0, top_k: None, ..GenerationParams::thinking() };
    let cases: [(&str, [f64; 4], GenerationParams, Vec<u32>); 5] = [
        ("full softmax", [2.0, 1.0, 0.5, -1.0], plain.clone(), vec![]),
        ("nucleus 0.8 at T=0.7", [2.0, 1.0, 0.5, -1.0], GenerationParams { temperature: 0.7, top_p: 0.8, ..plain.clone() }, vec![]),
        ("top-2 at T=0.6", [0.3, 1.2, -0.4, 1.1], GenerationParams { temperature: 0.6, top_k: Some(2), ..plain.clone() }, vec![]),
        ("thinking preset", [1.5, 1.4, 0.2, -3.0], GenerationParams::thinking(), vec![]),
        ("non-thinking preset with history", [1.0, 2.0, 0.5, 0.0], GenerationParams::non_thinking(), vec![1]),
    ];
    let n = tol::SAMPLING_DRAWS;
    for (ci, (name, logits, params, history)) in cases.iter().enumerate() {
        let want = oracle(logits, params, history);
        let hist: HashSet<u32> = history.iter().copied().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(80 + ci as u64);
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[ok(sample_next(logits, params, &hist, &mut rng))? as usize] += 1;
        }
        for (i, (&c, &p)) in counts.iter().zip(&want).enumerate() {
            if p == 0.0 {
                ensure!(c == 0, "{name}: token {i} drawn {c} times but is outside the kept set");
                continue;
            }
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (c as f64 - n as f64 * p).abs();
            ensure!(
                dev <= tol::SAMPLING_SIGMAS * sigma.max(1e-12),
                "{name}: token {i} drawn {c} times, oracle expects {:.0} (sigma {sigma:.1})",
                n as f64 * p
            );
        }
    }
    Ok(cases.len())
}

fn greedy() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let params = GenerationParams::greedy();
    for case in 0..200 {
        let mut logits: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        if case % 10 == 0 {
            logits[7] = 10.0;
            logits[3] = 10.0;
        }
        let best = (0..logits.len()).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
        for seed in 0..3 {
            let got = ok(sample_next(&logits, &params, &HashSet::new(), &mut ChaCha8Rng::seed_from_u64(seed)))?;
            ensure!(got as usize == best, "case {case}: greedy drew {got}, argmax is {best}");
        }
    }
    Ok(())
}

fn reproducible() -> Result<(), String> {
    let vocab = Vocab::bytes_only(&DEFAULT_SPECIALS);
    let model = ok(Model::init(preset("qwen3-0.6b-toy").unwrap().with_vocab(vocab.len()), 82))?;
    for mode in [Mode::Thinking, Mode::NonThinking] {
        let prompt = ok(prompt_ids(&vocab, &[ChatMessage::user("tell me a story")], mode))?;
        let params = GenerationParams { max_new_tokens: 64, seed: 83, ..GenerationParams::for_mode(mode) };
        let run = || -> Result<Vec<u8>, String> {
            let g = ok(generate(&mut ModelSession::new(&model), &vocab, &prompt, mode, &params))?;
            ok(vocab.decode(&g.all_ids()))
        };
        let (a, b) = (run()?, run()?);
        ensure!(!a.is_empty() && a == b, "{mode:?}: two runs with seed 83 differ");
        let greedy = GenerationParams { seed: 1, ..GenerationParams::greedy() };
        let g1 = ok(generate(&mut ModelSession::new(&model), &vocab, &prompt, mode, &GenerationParams { max_new_tokens: 32, ..greedy.clone() }))?;
        let g2 = ok(generate(&mut ModelSession::new(&model), &vocab, &prompt, mode, &GenerationParams { max_new_tokens: 32, seed: 99, ..greedy }))?;
        ensure!(g1.all_ids() == g2.all_ids(), "{mode:?}: greedy output depends on the seed");
    }
    Ok(())
}

fn presets() -> Result<(), String> {
    let t = GenerationParams::thinking();
    ensure!(
        (t.temperature, t.top_p, t.top_k, t.presence_penalty) == (0.6, 0.95, Some(20), 0.0),
        "thinking preset is {t:?}"
    );
    let n = GenerationParams::non_thinking();
    ensure!(
        (n.temperature, n.top_p, n.top_k, n.presence_penalty) == (0.7, 0.8, Some(20), 1.5),
        "non-thinking preset is {n:?}"
    );
    ensure!(MAX_OUTPUT_TOKENS == 32_768, "max output is {MAX_OUTPUT_TOKENS}");
    ensure!(
        t.max_new_tokens == MAX_OUTPUT_TOKENS && n.max_new_tokens == MAX_OUTPUT_TOKENS,
        "presets do not default to the maximum output length"
    );
    Ok(())
}

pub fn run() -> Outcome {
    greedy()?;
    let cases = frequencies()?;
    reproducible()?;
    presets()?;
    Ok(format!(
        "greedy = argmax across seeds; {cases} four-logit cases within {}σ over {} draws; seeded runs byte-identical; presets 0.6/0.95/20 and 0.7/0.8/20+1.5, max {MAX_OUTPUT_TOKENS}",
        tol::SAMPLING_SIGMAS,
        tol::SAMPLING_DRAWS
    ))
}
