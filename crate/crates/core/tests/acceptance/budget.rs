//! Thinking-budget enforcement against a stub model that never closes its
//! think block on its own.

use q3dk::chat_template::{ChatMessage, Mode};
use q3dk::generation::{generate, prompt_ids, EventKind, GenerationParams, LogitSource, DEFAULT_THINKING_BUDGET, STOP_THINKING_INSTRUCTION};
use q3dk::tokenizer::{Vocab, DEFAULT_SPECIALS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, ok, Outcome};

const INSTRUCTION: &str = "Considering the limited time by the user, I have to give the solution based on the thinking directly now.\n</think>.\n\n";

/// Random logits, with `</think>` and `<|im_end|>` pushed far out of reach.
struct Stub {
    vocab: usize,
    banned: [u32; 2],
    rng: ChaCha8Rng,
}

impl LogitSource for Stub {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn feed(&mut self, _: &[u32]) -> q3dk::Result<Vec<f64>> {
        let mut l: Vec<f64> = (0..self.vocab).map(|_| self.rng.random_range(-2.0..2.0)).collect();
        for b in self.banned {
            l[b as usize] = -1e6;
        }
        Ok(l)
    }
}

pub fn run() -> Outcome {
    ensure!(STOP_THINKING_INSTRUCTION == INSTRUCTION, "instruction text differs");
    ensure!(DEFAULT_THINKING_BUDGET == 8192, "default budget is {DEFAULT_THINKING_BUDGET}");
    let vocab = Vocab::bytes_only(&DEFAULT_SPECIALS);
    let chat = ok(vocab.chat_ids())?;
    let instruction = vocab.encode_str(INSTRUCTION, true);
    ensure!(ok(vocab.decode(&instruction))? == INSTRUCTION.as_bytes(), "instruction does not tokenize losslessly");
    let prompt = ok(prompt_ids(&vocab, &[ChatMessage::user("count to a million")], Mode::Thinking))?;

    for (i, budget) in [1usize, 8, DEFAULT_THINKING_BUDGET].into_iter().enumerate() {
        let mut stub = Stub { vocab: vocab.len(), banned: [chat.think_close, chat.im_end], rng: ChaCha8Rng::seed_from_u64(71 + i as u64) };
        let params = GenerationParams {
            thinking_budget: Some(budget),
            max_new_tokens: budget + 16,
            seed: 7 + i as u64,
            ..GenerationParams::thinking()
        };
        let g = ok(generate(&mut stub, &vocab, &prompt, Mode::Thinking, &params))?;
        ensure!(g.state.budget_fired, "B={budget}: budget never fired");
        ensure!(g.thinking.len() == budget, "B={budget}: {} sampled thinking tokens", g.thinking.len());
        ensure!(g.injected == instruction, "B={budget}: injected ids differ from the tokenized instruction");
        ensure!(ok(vocab.decode(&g.injected))? == INSTRUCTION.as_bytes(), "B={budget}: injected text is not byte-exact");
        let kinds: Vec<EventKind> = g.events.iter().map(|e| e.kind).collect();
        let thinking_run = kinds.iter().take_while(|&&k| k == EventKind::Thinking).count();
        let injected_run = kinds[thinking_run..].iter().take_while(|&&k| k == EventKind::Injected).count();
        ensure!(
            thinking_run == budget && injected_run == instruction.len(),
            "B={budget}: event order is {thinking_run} thinking then {injected_run} injected"
        );
        ensure!(
            kinds[thinking_run + injected_run..].iter().all(|&k| k == EventKind::Response) && !g.response.is_empty(),
            "B={budget}: generation did not continue in the response phase"
        );
        let total = g.thinking.len() + g.injected.len();
        ensure!(total <= budget + instruction.len(), "B={budget}: {total} thinking-side tokens");
    }
    Ok(format!(
        "B in {{1, 8, 8192}}: exactly B sampled thinking tokens, then the {}-token instruction byte-exact",
        instruction.len()
    ))
}
