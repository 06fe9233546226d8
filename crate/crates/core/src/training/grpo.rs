use std::collections::BTreeMap;

use rand::Rng;

use super::optim::OptimState;
use super::sft::named_grads;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::numerics::{kernels, Tape, Var};

pub const DEFAULT_CLIP_EPS: f64 = 0.2;
pub const DEFAULT_KL_COEF: f64 = 1e-3;
const ADV_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    pub kl_coef: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { clip_eps: DEFAULT_CLIP_EPS, kl_coef: DEFAULT_KL_COEF }
    }
}

/// Several sampled responses to one prompt, with rewards and the sampling
/// policy's log-probability of every response token.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<u32>,
    pub responses: Vec<Vec<u32>>,
    pub rewards: Vec<f64>,
    pub old_log_probs: Vec<Vec<f64>>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        let g = self.responses.len();
        if g < 2 || self.rewards.len() != g || self.old_log_probs.len() != g {
            return Err(shape_err!(
                "group of {g} responses, {} rewards, {} log-prob rows (need ≥ 2 responses)",
                self.rewards.len(),
                self.old_log_probs.len()
            ));
        }
        if self.prompt.is_empty() {
            return Err(Error::Contract("rollout group with an empty prompt".into()));
        }
        for (r, lp) in self.responses.iter().zip(&self.old_log_probs) {
            if r.is_empty() || r.len() != lp.len() {
                return Err(shape_err!("response of {} tokens with {} log-probs", r.len(), lp.len()));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("non-finite reward".into()));
        }
        Ok(())
    }
}

/// `(r − mean) / (std + 1e-8)` with the population standard deviation, or
/// `None` when every reward is equal.
pub fn group_advantages(rewards: &[f64]) -> Option<Vec<f64>> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || rewards.len() < 2 {
        return None;
    }
    Some(rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrpoReport {
    /// Total objective before the update (surrogate plus KL penalty).
    pub loss: f64,
    /// Mean `KL(policy ∥ reference)` estimate over trained tokens.
    pub kl: f64,
    /// Mean policy entropy at trained positions, in nats.
    pub entropy: f64,
    pub skipped_groups: usize,
    pub tokens: usize,
}

/// Samples `group_size` continuations of `prompt` from the full softmax of
/// `policy` (temperature 1), stopping at `stop` or after `max_new_tokens`,
/// and scores each with `reward`.
pub fn sample_group<R: Rng + ?Sized>(
    policy: &Model,
    prompt: &[u32],
    group_size: usize,
    max_new_tokens: usize,
    stop: Option<u32>,
    rng: &mut R,
    reward: &mut dyn FnMut(&[u32]) -> f64,
) -> Result<RolloutGroup> {
    if max_new_tokens == 0 {
        return Err(Error::Config("rollouts need max_new_tokens ≥ 1".into()));
    }
    let mut group = RolloutGroup {
        prompt: prompt.to_vec(),
        responses: Vec::new(),
        rewards: Vec::new(),
        old_log_probs: Vec::new(),
    };
    for _ in 0..group_size {
        let mut cache = policy.new_cache();
        let logits = policy.forward(prompt, &mut cache)?;
        let mut last = logits.row(logits.rows() - 1).to_vec();
        let (mut resp, mut lps) = (Vec::new(), Vec::new());
        loop {
            let lsm = kernels::log_softmax(&crate::numerics::Tensor::vector(last.clone()))?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = lsm.numel() - 1;
            for (i, lp) in lsm.data().iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    tok = i;
                    break;
                }
            }
            resp.push(tok as u32);
            lps.push(lsm.data()[tok]);
            if Some(tok as u32) == stop || resp.len() >= max_new_tokens {
                break;
            }
            let next = policy.forward(&[tok as u32], &mut cache)?;
            last = next.row(0).to_vec();
        }
        group.rewards.push(reward(&resp));
        group.responses.push(resp);
        group.old_log_probs.push(lps);
    }
    Ok(group)
}

/// Log-probabilities of each response token (with the logits they came
/// from) under `model`, bound to `tape`.
fn response_log_probs(tape: &Tape, model: &Model, params: &crate::model::ParamVars, prompt: &[u32], response: &[u32]) -> Result<(Var, Var)> {
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(response);
    let out = model.forward_on(tape, params, &ids[..ids.len() - 1], &mut model.new_cache())?;
    let rows: Vec<usize> = (prompt.len() - 1..ids.len() - 1).collect();
    let logits = tape.gather_rows(out.logits, &rows)?;
    Ok((tape.token_log_probs(logits, response)?, logits))
}

/// One GRPO update: group-normalized advantages broadcast over every token,
/// clipped ratio surrogate against the sampling log-probs, plus `kl_coef`
/// times the `KL(policy ∥ reference)` estimate. Groups whose rewards are all
/// equal are skipped.
pub fn grpo_step(
    policy: &mut Model,
    reference: &Model,
    groups: &[RolloutGroup],
    cfg: &GrpoConfig,
    opt: &mut OptimState,
) -> Result<GrpoReport> {
    if policy.config().vocab_size != reference.config().vocab_size {
        return Err(Error::Config("policy and reference vocabularies differ".into()));
    }
    let tape = Tape::new();
    let bound = policy.bind(&tape, true);
    let ref_tape = Tape::new();
    let ref_bound = reference.bind(&ref_tape, false);

    let (mut logps, mut old, mut adv, mut ref_lp) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut entropy = 0.0;
    let mut skipped = 0;
    for g in groups {
        g.validate()?;
        let Some(a) = group_advantages(&g.rewards) else {
            skipped += 1;
            continue;
        };
        for ((resp, olp), ai) in g.responses.iter().zip(&g.old_log_probs).zip(a) {
            let (lp, logits) = response_log_probs(&tape, policy, &bound, &g.prompt, resp)?;
            let probs = kernels::softmax(&tape.value(logits))?;
            entropy -= probs.data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            let (rlp, _) = response_log_probs(&ref_tape, reference, &ref_bound, &g.prompt, resp)?;
            ref_lp.extend_from_slice(ref_tape.value(rlp).data());
            logps.push(tape.reshape(lp, &[resp.len(), 1])?);
            old.extend_from_slice(olp);
            adv.extend(std::iter::repeat_n(ai, resp.len()));
        }
    }
    let tokens = old.len();
    if tokens == 0 {
        return Ok(GrpoReport { loss: 0.0, kl: 0.0, entropy: 0.0, skipped_groups: skipped, tokens: 0 });
    }
    let all = if logps.len() == 1 { logps[0] } else { tape.concat_rows(&logps)? };
    let all = tape.reshape(all, &[tokens])?;
    let surrogate = tape.clipped_surrogate(all, &old, &adv, cfg.clip_eps)?;
    let kl = tape.kl_estimate(all, &ref_lp)?;
    let kl_value = tape.value(kl).item()?;
    let penalty = tape.scale(kl, cfg.kl_coef)?;
    let loss = tape.add(surrogate, penalty)?;
    let loss_value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?;
    let grads: BTreeMap<_, _> = named_grads(&bound, &mut grads);
    opt.step_model(policy.weights_mut(), &grads)?;
    Ok(GrpoReport {
        loss: loss_value,
        kl: kl_value,
        entropy: entropy / tokens as f64,
        skipped_groups: skipped,
        tokens,
    })
}
