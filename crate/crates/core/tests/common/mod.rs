//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use q3dk::chat_template::{render, ChatMessage, Mode};
use q3dk::model::{preset, Model};
use q3dk::tokenizer::{train_bpe, Vocab, DEFAULT_SPECIALS};
use q3dk::training::{sft_step, AdamWConfig, DistillPrompt, OptimState, SftExample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A sum question, worked out step by step, and the bare answer.
pub struct Problem {
    pub question: String,
    pub thinking: String,
    pub answer: String,
}

pub fn problems(n: usize, seed: u64) -> Vec<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: u32 = rng.random_range(0..10);
            let b: u32 = rng.random_range(0..10);
            Problem {
                question: format!("add {a} {b}"),
                thinking: format!("{a} plus {b} is {}", a + b),
                answer: format!("{}", a + b),
            }
        })
        .collect()
}

pub fn transcript(p: &Problem, mode: Mode) -> Vec<ChatMessage> {
    match mode {
        Mode::Thinking => vec![
            ChatMessage::user(format!("{} /think", p.question)),
            ChatMessage::assistant(Some(p.thinking.clone()), p.answer.clone()),
        ],
        Mode::NonThinking => vec![
            ChatMessage::user(format!("{} /no_think", p.question)),
            ChatMessage::assistant(None, p.answer.clone()),
        ],
    }
}

/// Problems alternating between the two modes.
pub fn mixed_transcripts(problems: &[Problem]) -> Vec<Vec<ChatMessage>> {
    problems
        .iter()
        .enumerate()
        .map(|(i, p)| transcript(p, if i % 2 == 0 { Mode::Thinking } else { Mode::NonThinking }))
        .collect()
}

/// BPE trained on rendered transcripts.
pub fn chat_vocab(transcripts: &[Vec<ChatMessage>], size: usize) -> Vocab {
    let corpus: String = transcripts.iter().map(|t| render(t).unwrap()).collect();
    train_bpe(corpus.as_bytes(), size, &DEFAULT_SPECIALS).unwrap()
}

/// Prompt-masked example for a completed transcript.
pub fn sft_example(vocab: &Vocab, t: &[ChatMessage]) -> SftExample {
    let prompt = q3dk::chat_template::render_prompt(&t[..t.len() - 1]).unwrap();
    let ids = vocab.encode_str(&render(t).unwrap(), true);
    let plen = vocab.encode_str(&prompt, true).len();
    SftExample::from_sequence(&ids, plen).unwrap()
}

pub fn toy_model(vocab: &Vocab, layers: usize, seed: u64) -> Model {
    let mut cfg = preset("qwen3-0.6b-toy").unwrap().with_vocab(vocab.len());
    cfg.n_layers = layers;
    Model::init(cfg, seed).unwrap()
}

/// Minibatch SFT over `examples`, cycling in order.
pub fn train_sft(model: &mut Model, examples: &[SftExample], steps: usize, batch: usize, lr: f64) -> f64 {
    let mut opt = OptimState::new(AdamWConfig { lr, ..AdamWConfig::default() }).unwrap();
    let mut loss = f64::NAN;
    for s in 0..steps {
        let b: Vec<SftExample> = (0..batch).map(|i| examples[(s * batch + i) % examples.len()].clone()).collect();
        loss = sft_step(model, &b, &mut opt).unwrap().loss;
    }
    loss
}

pub fn distill_prompts(problems: &[Problem]) -> Vec<DistillPrompt> {
    problems
        .iter()
        .enumerate()
        .map(|(i, p)| DistillPrompt {
            messages: vec![ChatMessage::user(p.question.clone())],
            mode: if i % 2 == 0 { Mode::Thinking } else { Mode::NonThinking },
        })
        .collect()
}
