use std::collections::BTreeMap;

use super::optim::OptimState;
use crate::error::{shape_err, Error, Result};
use crate::model::{Model, ParamVars};
use crate::moe::{global_balance_loss_var, RoutingRecord};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Next-token training pair: `targets[i]` follows `inputs[..=i]` and counts
/// toward the loss when `mask[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SftExample {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

impl SftExample {
    /// Shifts `ids` by one and masks every target inside the first
    /// `prompt_len` tokens.
    pub fn from_sequence(ids: &[u32], prompt_len: usize) -> Result<Self> {
        if ids.len() < 2 {
            return Err(shape_err!("a training sequence needs at least two tokens"));
        }
        Ok(Self {
            inputs: ids[..ids.len() - 1].to_vec(),
            targets: ids[1..].to_vec(),
            mask: (1..ids.len()).map(|i| i >= prompt_len).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.targets.len() || self.mask.len() != self.targets.len() {
            return Err(shape_err!(
                "example with {} inputs, {} targets, {} mask entries",
                self.inputs.len(),
                self.targets.len(),
                self.mask.len()
            ));
        }
        Ok(())
    }

    pub fn scored(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SftReport {
    /// Masked cross-entropy before the update.
    pub loss: f64,
    /// Pooled load-balancing loss summed over layers (MoE only, unscaled).
    pub balance_loss: Option<f64>,
    pub tokens: usize,
}

/// Collects the gradient of every bound weight that has one.
pub(crate) fn named_grads(params: &ParamVars, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    params
        .iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name.to_string(), g)))
        .collect()
}

/// Adds `balance_alpha ×` the per-layer balance loss, each pooled over every
/// sequence of the batch.
pub(crate) fn add_balance_loss(
    tape: &Tape,
    model: &Model,
    loss: Var,
    routing: &[Vec<(RoutingRecord, Var)>],
) -> Result<(Var, Option<f64>)> {
    let Some(moe) = model.config().moe() else { return Ok((loss, None)) };
    let mut total: Option<Var> = None;
    for layer in 0..model.config().n_layers {
        let (records, probs): (Vec<RoutingRecord>, Vec<Var>) =
            routing.iter().map(|seq| seq[layer].clone()).unzip();
        let l = global_balance_loss_var(tape, &probs, &records, moe)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("MoE model without layers".into()))?;
    let value = tape.value(total).item()?;
    let scaled = tape.scale(total, moe.balance_alpha)?;
    Ok((tape.add(loss, scaled)?, Some(value)))
}

/// Masked cross-entropy averaged over every scored token of the batch.
pub fn sft_loss(tape: &Tape, model: &Model, params: &ParamVars, batch: &[SftExample]) -> Result<(Var, SftReport)> {
    let tokens: usize = batch.iter().map(SftExample::scored).sum();
    if tokens == 0 {
        return Err(Error::Contract("every target in the batch is masked".into()));
    }
    let mut parts = Vec::with_capacity(batch.len());
    let mut routing = Vec::with_capacity(batch.len());
    for ex in batch {
        ex.validate()?;
        let out = model.forward_on(tape, params, &ex.inputs, &mut model.new_cache())?;
        let w: Vec<f64> = ex.mask.iter().map(|&m| if m { 1.0 / tokens as f64 } else { 0.0 }).collect();
        parts.push(tape.cross_entropy_weighted(out.logits, &ex.targets, &w)?);
        routing.push(out.routing);
    }
    let mut ce = parts[0];
    for &p in &parts[1..] {
        ce = tape.add(ce, p)?;
    }
    let loss_value = tape.value(ce).item()?;
    let (total, balance_loss) = add_balance_loss(tape, model, ce, &routing)?;
    Ok((total, SftReport { loss: loss_value, balance_loss, tokens }))
}

/// One optimizer step on masked next-token cross-entropy (plus the MoE
/// balance term). Returns the loss before the update.
pub fn sft_step(model: &mut Model, batch: &[SftExample], opt: &mut OptimState) -> Result<SftReport> {
    let tape = Tape::new();
    let params = model.bind(&tape, true);
    let (loss, report) = sft_loss(&tape, model, &params, batch)?;
    let mut grads = tape.backward(loss)?;
    let grads = named_grads(&params, &mut grads);
    opt.step_model(model.weights_mut(), &grads)?;
    Ok(report)
}

/// Masked cross-entropy without a gradient.
pub fn sft_eval(model: &Model, batch: &[SftExample]) -> Result<SftReport> {
    let tape = Tape::new();
    let params = model.bind(&tape, false);
    sft_loss(&tape, model, &params, batch).map(|(_, r)| r)
}
