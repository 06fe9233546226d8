//! Named model configurations.
//!
//! Every published model has a full-size preset (for shape auditing, never
//! allocated) and a `-toy` variant that keeps the structural ratios at desk
//! scale.

use super::config::{FeedForward, ModelConfig};
use crate::attention::{AttnConfig, ROPE_BASE_LONG};
use crate::error::{Error, Result};
use crate::moe::{MoeConfig, DEFAULT_BALANCE_ALPHA};
use crate::numerics::DEFAULT_RMS_EPS;
use crate::tokenizer::PRODUCTION_VOCAB_SIZE;

/// One row of the preset table.
///
/// Published: `layers`, `heads_q`, `heads_kv`, `tie_embedding` (dense rows),
/// `long_context`, `experts`. Everything else is invented: `d_model`,
/// `ffn_hidden`, `head_dim` (128 for all rows), the MoE tie flag (`false`),
/// and every toy column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PresetRow {
    pub name: &'static str,
    pub layers: usize,
    pub heads_q: usize,
    pub heads_kv: usize,
    pub tie_embedding: bool,
    /// 128K context (true) or 32K (false).
    pub long_context: bool,
    /// `(total, active)` experts for MoE rows.
    pub experts: Option<(usize, usize)>,
    pub d_model: usize,
    /// Dense FFN width, or per-expert width for MoE rows.
    pub ffn_hidden: usize,
    pub toy_layers: usize,
    pub toy_heads_q: usize,
    pub toy_heads_kv: usize,
    pub toy_experts: Option<(usize, usize)>,
}

const FULL_HEAD_DIM: usize = 128;
const FULL_TRAINED_WINDOW: usize = 32_768;

const TOY_D_MODEL: usize = 32;
const TOY_HEAD_DIM: usize = 8;
const TOY_FFN_HIDDEN: usize = 64;
const TOY_EXPERT_HIDDEN: usize = 16;
const TOY_WINDOW: usize = 256;
pub const TOY_VOCAB_SIZE: usize = 512;

#[rustfmt::skip]
pub const PRESET_TABLE: [PresetRow; 8] = [
    // name, layers, Q, KV, tie, 128K, experts, d_model, ffn | toy: layers, Q, KV, experts
    row("qwen3-0.6b",      28, 16,  8, true,  false, None,            1024,  3072,  2, 4, 2, None),
    row("qwen3-1.7b",      28, 16,  8, true,  false, None,            2048,  6144,  2, 4, 2, None),
    row("qwen3-4b",        36, 32,  8, true,  true,  None,            2560,  9728,  2, 4, 1, None),
    row("qwen3-8b",        36, 32,  8, false, true,  None,            4096, 12288,  2, 4, 1, None),
    row("qwen3-14b",       40, 40,  8, false, true,  None,            5120, 17408,  2, 5, 1, None),
    row("qwen3-32b",       64, 64,  8, false, true,  None,            5120, 25600,  2, 8, 1, None),
    row("qwen3-30b-a3b",   48, 32,  4, false, true,  Some((128, 8)),  2048,   768,  4, 8, 1, Some((8, 2))),
    row("qwen3-235b-a22b", 94, 64,  4, false, true,  Some((128, 8)),  4096,  1536,  4, 16, 1, Some((8, 2))),
];

#[allow(clippy::too_many_arguments)]
const fn row(
    name: &'static str,
    layers: usize,
    heads_q: usize,
    heads_kv: usize,
    tie_embedding: bool,
    long_context: bool,
    experts: Option<(usize, usize)>,
    d_model: usize,
    ffn_hidden: usize,
    toy_layers: usize,
    toy_heads_q: usize,
    toy_heads_kv: usize,
    toy_experts: Option<(usize, usize)>,
) -> PresetRow {
    PresetRow {
        name,
        layers,
        heads_q,
        heads_kv,
        tie_embedding,
        long_context,
        experts,
        d_model,
        ffn_hidden,
        toy_layers,
        toy_heads_q,
        toy_heads_kv,
        toy_experts,
    }
}

/// The MoE toy everyone reaches for; same as `qwen3-30b-a3b-toy`.
pub const MOE_TOY_ALIAS: &str = "qwen3-moe-toy";

pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = PRESET_TABLE.iter().map(|r| r.name.to_string()).collect();
    names.extend(PRESET_TABLE.iter().map(|r| format!("{}-toy", r.name)));
    names.push(MOE_TOY_ALIAS.to_string());
    names
}

pub fn preset_row(name: &str) -> Option<&'static PresetRow> {
    PRESET_TABLE.iter().find(|r| r.name == name)
}

/// Looks up a preset by name. Names without `-toy` give the full-size
/// configuration.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let name = if name == MOE_TOY_ALIAS { "qwen3-30b-a3b-toy" } else { name };
    let unknown = || Error::Config(format!("unknown preset {name:?}; known: {}", preset_names().join(", ")));
    match name.strip_suffix("-toy") {
        Some(base) => toy_config(preset_row(base).ok_or_else(unknown)?),
        None => full_config(preset_row(name).ok_or_else(unknown)?),
    }
}

fn full_config(r: &PresetRow) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        name: r.name.to_string(),
        n_layers: r.layers,
        d_model: r.d_model,
        attn: AttnConfig {
            n_heads_q: r.heads_q,
            n_heads_kv: r.heads_kv,
            head_dim: FULL_HEAD_DIM,
            rope_base: ROPE_BASE_LONG,
            yarn_scale: 1.0,
            dca_chunk: None,
            max_position: FULL_TRAINED_WINDOW,
        },
        ffn: ffn(r.experts, r.ffn_hidden),
        vocab_size: PRODUCTION_VOCAB_SIZE,
        tie_embedding: r.tie_embedding,
        max_context: FULL_TRAINED_WINDOW,
        rms_eps: DEFAULT_RMS_EPS,
    };
    let cfg = if r.long_context { cfg.extend_context(4) } else { cfg };
    cfg.validate()?;
    Ok(cfg)
}

fn toy_config(r: &PresetRow) -> Result<ModelConfig> {
    let hidden = if r.toy_experts.is_some() { TOY_EXPERT_HIDDEN } else { TOY_FFN_HIDDEN };
    let cfg = ModelConfig {
        name: format!("{}-toy", r.name),
        n_layers: r.toy_layers,
        d_model: TOY_D_MODEL,
        attn: AttnConfig {
            n_heads_q: r.toy_heads_q,
            n_heads_kv: r.toy_heads_kv,
            head_dim: TOY_HEAD_DIM,
            rope_base: ROPE_BASE_LONG,
            yarn_scale: 1.0,
            dca_chunk: None,
            max_position: TOY_WINDOW,
        },
        ffn: ffn(r.toy_experts, hidden),
        vocab_size: TOY_VOCAB_SIZE,
        tie_embedding: r.tie_embedding,
        max_context: TOY_WINDOW,
        rms_eps: DEFAULT_RMS_EPS,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn ffn(experts: Option<(usize, usize)>, hidden: usize) -> FeedForward {
    match experts {
        Some((n, k)) => FeedForward::Moe(MoeConfig {
            n_experts: n,
            top_k: k,
            expert_hidden: hidden,
            balance_alpha: DEFAULT_BALANCE_ALPHA,
        }),
        None => FeedForward::Dense { hidden },
    }
}
