//! After mixed-mode SFT, a model cut off mid-think by the budget carries on
//! in the response phase without reopening a think block.

use q3dk::chat_template::{ChatMessage, Mode};
use q3dk::generation::{generate, prompt_ids, GenerationParams, ModelSession};
use q3dk::tokenizer::THINK_OPEN;

use crate::common::{chat_vocab, mixed_transcripts, problems, sft_example, toy_model, train_sft};
use crate::{ensure, ok, tol, Outcome};

pub fn run() -> Outcome {
    let probs = problems(64, 7);
    let transcripts = mixed_transcripts(&probs);
    let vocab = chat_vocab(&transcripts, 300);
    let examples: Vec<_> = transcripts.iter().map(|t| sft_example(&vocab, t)).collect();
    let mut model = toy_model(&vocab, 2, 3);
    let loss = train_sft(&mut model, &examples, 300, 8, 1e-2);
    let think_open = vocab.special_id(THINK_OPEN).ok_or("no <think> id")?;

    let mut passes = 0;
    let mut reopened = 0;
    for trial in 0..tol::FUSION_TRIALS {
        let p = &probs[trial % probs.len()];
        let messages = [ChatMessage::user(format!("{} /think", p.question))];
        let prompt = ok(prompt_ids(&vocab, &messages, Mode::Thinking))?;
        let params = GenerationParams {
            seed: trial as u64,
            thinking_budget: Some(1 + trial % 4),
            max_new_tokens: 40,
            ..GenerationParams::thinking()
        };
        let g = ok(generate(&mut ModelSession::new(&model), &vocab, &prompt, Mode::Thinking, &params))?;
        let second_think = g.response.contains(&think_open);
        reopened += second_think as usize;
        passes += (g.state.budget_fired && !g.response.is_empty() && !second_think) as usize;
    }
    ensure!(
        passes >= tol::FUSION_PASSES,
        "{passes}/{} trials continued cleanly ({reopened} reopened a think block)",
        tol::FUSION_TRIALS
    );
    Ok(format!(
        "SFT loss {loss:.3}; {passes}/{} truncated trials answered without a second <think>",
        tol::FUSION_TRIALS
    ))
}
