use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FeedForward, ModelConfig};
use super::weights::ModelWeights;
use crate::attention::{self_attention, KvCache, SelfAttentionParams};
use crate::error::{shape_err, Error, Result};
use crate::moe::{moe_forward, route_var, ExpertParams, RoutingRecord};
use crate::numerics::{swiglu_ffn_var, Tape, Tensor, Var};

/// A configuration together with weights that satisfy it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

/// Every weight of a model bound to one tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no weight named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Logits `[t, vocab]` plus, for MoE models, the routing of every layer
/// (record and the router-probability variable that produced it).
pub struct ForwardOutput {
    pub logits: Var,
    pub routing: Vec<(RoutingRecord, Var)>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    /// Randomly initialized model; the same seed gives the same weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = ModelWeights::init(&config, &mut rng)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config.n_layers, self.config.attn.kv_width())
    }

    /// Puts every weight on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> ParamVars {
        let vars = self
            .weights
            .names()
            .map(|n| {
                let t = self.weights.shared(n).expect("name comes from the map");
                (n.to_string(), tape.leaf_shared(t, trainable))
            })
            .collect();
        ParamVars { vars }
    }

    /// Runs `ids` (positions `cache.past_len()..`) through the network,
    /// appending their keys and values to `cache`.
    pub fn forward_on(&self, tape: &Tape, p: &ParamVars, ids: &[u32], cache: &mut KvCache) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if ids.is_empty() {
            return Err(shape_err!("forward needs at least one token"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        if cache.n_layers() != cfg.n_layers || cache.layer(0).width() != cfg.attn.kv_width() {
            return Err(shape_err!(
                "cache of {} layers × width {} for a {}-layer model with kv width {}",
                cache.n_layers(),
                cache.layer(0).width(),
                cfg.n_layers,
                cfg.attn.kv_width()
            ));
        }
        if cache.past_len() + ids.len() > cfg.max_context {
            return Err(Error::Contract(format!(
                "{} cached + {} new tokens exceed the context limit {}",
                cache.past_len(),
                ids.len(),
                cfg.max_context
            )));
        }

        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let embed = p.get("embed")?;
        let mut x = tape.gather_rows(embed, &rows)?;
        let mut routing = Vec::new();
        for l in 0..cfg.n_layers {
            let w = |s: &str| p.get(&format!("layers.{l}.{s}"));
            let attn = SelfAttentionParams {
                wq: w("attn.wq")?,
                wk: w("attn.wk")?,
                wv: w("attn.wv")?,
                wo: w("attn.wo")?,
                q_norm: w("attn.q_norm")?,
                k_norm: w("attn.k_norm")?,
            };
            let h = tape.rmsnorm(x, w("attn_norm")?, cfg.rms_eps)?;
            let a = self_attention(tape, &cfg.attn, &attn, h, cache.layer_mut(l), cfg.rms_eps)?;
            x = tape.add(x, a)?;

            let h = tape.rmsnorm(x, w("ffn_norm")?, cfg.rms_eps)?;
            let f = match &cfg.ffn {
                FeedForward::Dense { .. } => swiglu_ffn_var(tape, h, w("ffn.w_gate")?, w("ffn.w_up")?, w("ffn.w_down")?)?,
                FeedForward::Moe(m) => {
                    let (record, probs) = route_var(tape, h, w("moe.router")?, m)?;
                    let experts = (0..m.n_experts)
                        .map(|e| {
                            Ok(ExpertParams {
                                w_gate: w(&format!("moe.experts.{e}.w_gate"))?,
                                w_up: w(&format!("moe.experts.{e}.w_up"))?,
                                w_down: w(&format!("moe.experts.{e}.w_down"))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let out = moe_forward(tape, h, &experts, &record, probs)?;
                    routing.push((record, probs));
                    out
                }
            };
            x = tape.add(x, f)?;
        }
        let x = tape.rmsnorm(x, p.get("final_norm")?, cfg.rms_eps)?;
        let head = if cfg.tie_embedding { tape.transpose(embed)? } else { p.get("lm_head")? };
        let logits = tape.matmul(x, head)?;
        Ok(ForwardOutput { logits, routing })
    }

    /// Inference-only forward returning logits `[t, vocab]`.
    pub fn forward(&self, ids: &[u32], cache: &mut KvCache) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let out = self.forward_on(&tape, &p, ids, cache)?;
        Ok((*tape.value(out.logits)).clone())
    }
}
