use std::collections::HashSet;

use rand::Rng;

use crate::chat_template::Mode;
use crate::error::{Error, Result};

/// Longest generation the presets allow.
pub const MAX_OUTPUT_TOKENS: usize = 32_768;
/// The usual thinking budget for long-reasoning evaluation.
pub const DEFAULT_THINKING_BUDGET: usize = 8192;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationParams {
    /// 0 means greedy.
    pub temperature: f64,
    pub top_p: f64,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub presence_penalty: f64,
    pub max_new_tokens: usize,
    pub thinking_budget: Option<usize>,
    pub seed: u64,
}

impl GenerationParams {
    /// Temperature 0.6, top-p 0.95, top-k 20.
    pub fn thinking() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            top_k: Some(20),
            presence_penalty: 0.0,
            max_new_tokens: MAX_OUTPUT_TOKENS,
            thinking_budget: None,
            seed: 0,
        }
    }

    /// Temperature 0.7, top-p 0.8, top-k 20, presence penalty 1.5.
    pub fn non_thinking() -> Self {
        Self { temperature: 0.7, top_p: 0.8, presence_penalty: 1.5, ..Self::thinking() }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Thinking => Self::thinking(),
            Mode::NonThinking => Self::non_thinking(),
        }
    }

    pub fn greedy() -> Self {
        Self { temperature: 0.0, top_p: 1.0, top_k: None, ..Self::thinking() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature {} must be finite and ≥ 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !self.presence_penalty.is_finite() {
            return Err(Error::Config("presence penalty must be finite".into()));
        }
        Ok(())
    }
}

/// The distribution [`sample_next`] draws from, as `(id, probability)` pairs
/// in descending order. Greedy decoding yields a single pair.
pub fn sampling_distribution(logits: &[f64], params: &GenerationParams, history: &HashSet<u32>) -> Result<Vec<(u32, f64)>> {
    params.validate()?;
    if logits.is_empty() {
        return Err(Error::Contract("cannot sample from an empty vocabulary".into()));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logit {i} is {}", logits[i])));
    }
    let mut l = logits.to_vec();
    for &id in history {
        if let Some(v) = l.get_mut(id as usize) {
            *v -= params.presence_penalty;
        }
    }
    let mut order: Vec<u32> = (0..l.len() as u32).collect();
    order.sort_by(|&a, &b| l[b as usize].total_cmp(&l[a as usize]).then(a.cmp(&b)));
    if params.temperature == 0.0 {
        return Ok(vec![(order[0], 1.0)]);
    }
    if let Some(k) = params.top_k {
        order.truncate(k);
    }
    let top = l[order[0] as usize];
    let weights: Vec<f64> = order
        .iter()
        .map(|&id| ((l[id as usize] - top) / params.temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut kept = 0;
    let mut mass = 0.0;
    for w in &weights {
        mass += w / total;
        kept += 1;
        if mass >= params.top_p {
            break;
        }
    }
    let kept_total: f64 = weights[..kept].iter().sum();
    Ok(order[..kept]
        .iter()
        .zip(&weights)
        .map(|(&id, &w)| (id, w / kept_total))
        .collect())
}

/// Presence penalty, temperature, top-k, then top-p; renormalize and draw.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f64],
    params: &GenerationParams,
    history: &HashSet<u32>,
    rng: &mut R,
) -> Result<u32> {
    let dist = sampling_distribution(logits, params, history)?;
    if dist.len() == 1 {
        return Ok(dist[0].0);
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(id, p) in &dist {
        acc += p;
        if u < acc {
            return Ok(id);
        }
    }
    Ok(dist[dist.len() - 1].0)
}
