use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attention::AttnConfig;
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::numerics::DEFAULT_RMS_EPS;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Dense,
    Moe,
}

/// Feed-forward flavour of every block. A model is either all-dense or all-MoE.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward {
    Dense { hidden: usize },
    Moe(MoeConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub attn: AttnConfig,
    pub ffn: FeedForward,
    pub vocab_size: usize,
    pub tie_embedding: bool,
    pub max_context: usize,
    pub rms_eps: f64,
}

/// Name and shape of every tensor a configuration requires, plus parameter
/// totals. Computed without allocating any tensor data.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeAudit {
    pub tensors: Vec<(String, Vec<usize>)>,
    pub total_params: u128,
    /// Parameters touched per token (all of a dense model; attention, router,
    /// embeddings and `top_k` experts of an MoE model).
    pub active_params: u128,
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self.ffn {
            FeedForward::Dense { .. } => ModelKind::Dense,
            FeedForward::Moe(_) => ModelKind::Moe,
        }
    }

    pub fn moe(&self) -> Option<&MoeConfig> {
        match &self.ffn {
            FeedForward::Moe(m) => Some(m),
            FeedForward::Dense { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config(format!("degenerate model dimensions in {}", self.name)));
        }
        match &self.ffn {
            FeedForward::Dense { hidden } if *hidden == 0 => {
                return Err(Error::Config("dense FFN hidden size must be positive".into()))
            }
            FeedForward::Moe(m) => m.validate()?,
            _ => {}
        }
        if self.max_context == 0 {
            return Err(Error::Config("max_context must be positive".into()));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::Config("rms eps must be positive".into()));
        }
        Ok(())
    }

    /// Turns on YARN with `factor` and dual chunk attention (chunk = ¾ of the
    /// trained window), and multiplies the usable context by `factor`.
    pub fn extend_context(mut self, factor: usize) -> Self {
        self.attn.yarn_scale = factor as f64;
        self.attn.dca_chunk = Some(self.attn.max_position * 3 / 4);
        self.max_context = self.attn.max_position * factor;
        self
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    /// Every required tensor in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let a = &self.attn;
        let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("attn_norm"), vec![d]));
            out.push((p("attn.wq"), vec![d, a.q_width()]));
            out.push((p("attn.wk"), vec![d, a.kv_width()]));
            out.push((p("attn.wv"), vec![d, a.kv_width()]));
            out.push((p("attn.wo"), vec![a.q_width(), d]));
            out.push((p("attn.q_norm"), vec![a.head_dim]));
            out.push((p("attn.k_norm"), vec![a.head_dim]));
            out.push((p("ffn_norm"), vec![d]));
            match &self.ffn {
                FeedForward::Dense { hidden } => {
                    out.push((p("ffn.w_gate"), vec![d, *hidden]));
                    out.push((p("ffn.w_up"), vec![d, *hidden]));
                    out.push((p("ffn.w_down"), vec![*hidden, d]));
                }
                FeedForward::Moe(m) => {
                    out.push((p("moe.router"), vec![d, m.n_experts]));
                    for e in 0..m.n_experts {
                        out.push((p(&format!("moe.experts.{e}.w_gate")), vec![d, m.expert_hidden]));
                        out.push((p(&format!("moe.experts.{e}.w_up")), vec![d, m.expert_hidden]));
                        out.push((p(&format!("moe.experts.{e}.w_down")), vec![m.expert_hidden, d]));
                    }
                }
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        if !self.tie_embedding {
            out.push(("lm_head".to_string(), vec![d, self.vocab_size]));
        }
        out
    }

    pub fn audit(&self) -> Result<ShapeAudit> {
        self.validate()?;
        let tensors = self.tensor_shapes();
        let numel = |s: &[usize]| s.iter().map(|&x| x as u128).product::<u128>();
        let total_params = tensors.iter().map(|(_, s)| numel(s)).sum();
        let active_params = match &self.ffn {
            FeedForward::Dense { .. } => total_params,
            FeedForward::Moe(m) => {
                let per_expert = 3 * self.d_model as u128 * m.expert_hidden as u128;
                let idle = (m.n_experts - m.top_k) as u128 * per_expert * self.n_layers as u128;
                total_params - idle
            }
        };
        Ok(ShapeAudit { tensors, total_params, active_params })
    }

    /// `key=value` lines, one field per line.
    pub fn to_text(&self) -> String {
        let a = &self.attn;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("name", self.name.clone());
        kv("kind", if self.kind() == ModelKind::Dense { "dense" } else { "moe" }.into());
        kv("n_layers", self.n_layers.to_string());
        kv("d_model", self.d_model.to_string());
        kv("n_heads_q", a.n_heads_q.to_string());
        kv("n_heads_kv", a.n_heads_kv.to_string());
        kv("head_dim", a.head_dim.to_string());
        kv("rope_base", a.rope_base.to_string());
        kv("yarn_scale", a.yarn_scale.to_string());
        kv("dca_chunk", a.dca_chunk.map_or("none".into(), |c| c.to_string()));
        kv("max_position", a.max_position.to_string());
        match &self.ffn {
            FeedForward::Dense { hidden } => kv("ffn_hidden", hidden.to_string()),
            FeedForward::Moe(m) => {
                kv("n_experts", m.n_experts.to_string());
                kv("top_k", m.top_k.to_string());
                kv("expert_hidden", m.expert_hidden.to_string());
                kv("balance_alpha", m.balance_alpha.to_string());
            }
        }
        kv("vocab_size", self.vocab_size.to_string());
        kv("tie_embedding", self.tie_embedding.to_string());
        kv("max_context", self.max_context.to_string());
        kv("rms_eps", self.rms_eps.to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        let get = |k: &str| map.get(k).map(String::as_str).ok_or_else(|| Error::Format(format!("config lacks {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Format(format!("config {k}={v} is not a valid number")))
        }
        let n = |k: &str| -> Result<usize> { num(k, get(k)?) };
        let f = |k: &str| -> Result<f64> { num(k, get(k)?) };
        let ffn = match get("kind")? {
            "dense" => FeedForward::Dense { hidden: n("ffn_hidden")? },
            "moe" => FeedForward::Moe(MoeConfig {
                n_experts: n("n_experts")?,
                top_k: n("top_k")?,
                expert_hidden: n("expert_hidden")?,
                balance_alpha: f("balance_alpha")?,
            }),
            other => return Err(Error::Format(format!("unknown model kind {other}"))),
        };
        let dca_chunk = match get("dca_chunk")? {
            "none" => None,
            v => Some(num("dca_chunk", v)?),
        };
        let tie_embedding = match get("tie_embedding")? {
            "true" => true,
            "false" => false,
            v => return Err(Error::Format(format!("tie_embedding={v} is not a boolean"))),
        };
        let cfg = ModelConfig {
            name: get("name")?.to_string(),
            n_layers: n("n_layers")?,
            d_model: n("d_model")?,
            attn: AttnConfig {
                n_heads_q: n("n_heads_q")?,
                n_heads_kv: n("n_heads_kv")?,
                head_dim: n("head_dim")?,
                rope_base: f("rope_base")?,
                yarn_scale: f("yarn_scale")?,
                dca_chunk,
                max_position: n("max_position")?,
            },
            ffn,
            vocab_size: n("vocab_size")?,
            tie_embedding,
            max_context: n("max_context")?,
            rms_eps: map.get("rms_eps").map_or(Ok(DEFAULT_RMS_EPS), |v| num("rms_eps", v))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key {}", i + 1, k.trim())));
        }
    }
    Ok(map)
}
