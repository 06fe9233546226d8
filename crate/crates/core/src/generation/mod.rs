//! Autoregressive decoding with thinking-budget control.

mod sampling;

use std::collections::HashSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use sampling::{
    sample_next, sampling_distribution, GenerationParams, DEFAULT_THINKING_BUDGET, MAX_OUTPUT_TOKENS,
};

use crate::attention::KvCache;
use crate::chat_template::{render_prompt, ChatMessage, Mode, EMPTY_THINK_BLOCK};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::{Vocab, THINK_OPEN};

/// Forced into the context when the thinking budget runs out.
pub const STOP_THINKING_INSTRUCTION: &str = "Considering the limited time by the user, I have to give the solution based on the thinking directly now.\n</think>.\n\n";

/// Anything that turns a token stream into next-token logits.
pub trait LogitSource {
    fn vocab_size(&self) -> usize;

    /// Longest context the source accepts, if bounded.
    fn max_context(&self) -> Option<usize> {
        None
    }

    /// Appends `ids` to the context and returns the logits that follow them.
    fn feed(&mut self, ids: &[u32]) -> Result<Vec<f64>>;
}

/// A model with its own cache.
pub struct ModelSession<'a> {
    model: &'a Model,
    cache: KvCache,
}

impl<'a> ModelSession<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, cache: model.new_cache() }
    }

    pub fn context_len(&self) -> usize {
        self.cache.past_len()
    }
}

impl LogitSource for ModelSession<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn max_context(&self) -> Option<usize> {
        Some(self.model.config().max_context)
    }

    fn feed(&mut self, ids: &[u32]) -> Result<Vec<f64>> {
        let logits = self.model.forward(ids, &mut self.cache)?;
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Thinking,
    Responding,
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetState {
    pub phase: Phase,
    /// Sampled thinking tokens; injected ones are not counted.
    pub thinking_tokens_used: usize,
    pub budget_fired: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Thinking,
    Injected,
    Response,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Thinking => "thinking",
            EventKind::Injected => "injected",
            EventKind::Response => "response",
        }
    }
}

/// One emitted token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenEvent {
    pub kind: EventKind,
    pub token: u32,
    pub text: String,
}

impl fmt::Display for TokenEvent {
    /// `{kind}\t{token}\t{text}` with `\\`, `\t`, `\n` and `\r` escaped.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t", self.kind.as_str(), self.token)?;
        for c in self.text.chars() {
            match c {
                '\\' => f.write_str("\\\\")?,
                '\t' => f.write_str("\\t")?,
                '\n' => f.write_str("\\n")?,
                '\r' => f.write_str("\\r")?,
                c => write!(f, "{c}")?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EndOfTurn,
    MaxTokens,
    ContextFull,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Sampled while thinking, including a naturally produced `</think>`.
    pub thinking: Vec<u32>,
    pub injected: Vec<u32>,
    /// Sampled while responding, without the final `<|im_end|>`.
    pub response: Vec<u32>,
    pub state: BudgetState,
    pub stop: StopReason,
    pub events: Vec<TokenEvent>,
}

impl Generation {
    /// Every generated id in context order.
    pub fn all_ids(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.token).collect()
    }
}

/// Prompt ids for the next assistant turn. The resolved mode decides how the
/// turn opens: `<think>\n` for thinking, the empty think block otherwise.
pub fn prompt_ids(vocab: &Vocab, messages: &[ChatMessage], mode: Mode) -> Result<Vec<u32>> {
    let mut text = render_prompt(messages)?;
    match mode {
        Mode::Thinking => {
            text.push_str(THINK_OPEN);
            text.push('\n');
        }
        Mode::NonThinking => text.push_str(EMPTY_THINK_BLOCK),
    }
    Ok(vocab.encode_str(&text, true))
}

/// Decodes after `prompt`, calling `on_event` for every token as it is
/// placed in the context.
pub fn stream(
    source: &mut dyn LogitSource,
    vocab: &Vocab,
    prompt: &[u32],
    mode: Mode,
    params: &GenerationParams,
    on_event: &mut dyn FnMut(&TokenEvent) -> Result<()>,
) -> Result<Generation> {
    params.validate()?;
    if source.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "model has {} logits but the tokenizer has {} ids",
            source.vocab_size(),
            vocab.len()
        )));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("generation needs a non-empty prompt".into()));
    }
    let ids = vocab.chat_ids()?;
    let instruction = vocab.encode_str(STOP_THINKING_INSTRUCTION, true);
    let limit = source.max_context().unwrap_or(usize::MAX);
    if prompt.len() > limit {
        return Err(Error::Contract(format!("prompt of {} tokens exceeds context {limit}", prompt.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut state = BudgetState {
        phase: if mode == Mode::Thinking { Phase::Thinking } else { Phase::Responding },
        thinking_tokens_used: 0,
        budget_fired: false,
    };
    let mut out = Generation {
        thinking: Vec::new(),
        injected: Vec::new(),
        response: Vec::new(),
        state,
        stop: StopReason::MaxTokens,
        events: Vec::new(),
    };
    let mut history = HashSet::new();
    let mut position = prompt.len();
    let mut sampled = 0;
    let mut logits = source.feed(prompt)?;
    let mut emit = |out: &mut Generation, kind, token| -> Result<()> {
        let ev = TokenEvent { kind, token, text: vocab.decode_lossy(&[token])? };
        on_event(&ev)?;
        out.events.push(ev);
        Ok(())
    };

    let stop = loop {
        let budget_hit = state.phase == Phase::Thinking
            && params.thinking_budget.is_some_and(|b| state.thinking_tokens_used >= b);
        if budget_hit {
            if position + instruction.len() > limit {
                break StopReason::ContextFull;
            }
            for &t in &instruction {
                emit(&mut out, EventKind::Injected, t)?;
                history.insert(t);
            }
            out.injected.extend_from_slice(&instruction);
            state.budget_fired = true;
            state.phase = Phase::Responding;
            logits = source.feed(&instruction)?;
            position += instruction.len();
            continue;
        }
        if sampled >= params.max_new_tokens {
            break StopReason::MaxTokens;
        }
        let token = sample_next(&logits, params, &history, &mut rng)?;
        sampled += 1;
        history.insert(token);
        if token == ids.im_end {
            break StopReason::EndOfTurn;
        }
        match state.phase {
            Phase::Thinking => {
                state.thinking_tokens_used += 1;
                out.thinking.push(token);
                emit(&mut out, EventKind::Thinking, token)?;
                if token == ids.think_close {
                    state.phase = Phase::Responding;
                }
            }
            _ => {
                out.response.push(token);
                emit(&mut out, EventKind::Response, token)?;
            }
        }
        if position + 1 > limit {
            break StopReason::ContextFull;
        }
        logits = source.feed(&[token])?;
        position += 1;
    };
    state.phase = Phase::Done;
    out.state = state;
    out.stop = stop;
    Ok(out)
}

/// [`stream`] without a callback.
pub fn generate(
    source: &mut dyn LogitSource,
    vocab: &Vocab,
    prompt: &[u32],
    mode: Mode,
    params: &GenerationParams,
) -> Result<Generation> {
    stream(source, vocab, prompt, mode, params, &mut |_| Ok(()))
}
