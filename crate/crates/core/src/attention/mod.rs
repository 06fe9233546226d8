//! Grouped-query attention with QK-Norm and the long-context position stack:
//! RoPE, ABF base frequency, YARN frequency interpolation and dual chunk
//! attention.

mod cache;
mod dca;
mod gqa;
mod rope;

pub use cache::{KvCache, LayerKv};
pub use dca::{dca_position_map, DcaMap};
pub use gqa::{dca_attend, gqa_attend, gqa_attend_traced, self_attention, AttentionTrace, SelfAttentionParams};
pub use rope::{apply_rope, logit_scale, rope_frequencies, yarn_mscale, YARN_BETA_FAST, YARN_BETA_SLOW};

use crate::error::{Error, Result};

/// RoPE base used before long-context training.
pub const ROPE_BASE_SHORT: f64 = 10_000.0;
/// RoPE base after the ABF adjustment for long-context training.
pub const ROPE_BASE_LONG: f64 = 1_000_000.0;
/// YARN factor used for length extrapolation at evaluation time.
pub const YARN_EVAL_SCALE: f64 = 4.0;

/// Attention layout and position-encoding settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnConfig {
    pub n_heads_q: usize,
    pub n_heads_kv: usize,
    pub head_dim: usize,
    pub rope_base: f64,
    /// 1 disables YARN.
    pub yarn_scale: f64,
    /// Tokens per chunk for dual chunk attention; `None` disables it.
    pub dca_chunk: Option<usize>,
    /// Context length the position encoding was trained on.
    pub max_position: usize,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_heads_q == 0 || self.n_heads_kv == 0 || self.head_dim == 0 {
            return bad(format!("empty attention layout {self:?}"));
        }
        if self.n_heads_q % self.n_heads_kv != 0 {
            return bad(format!("{} query heads not divisible by {} kv heads", self.n_heads_q, self.n_heads_kv));
        }
        if self.head_dim % 2 != 0 {
            return bad(format!("head_dim {} must be even for RoPE", self.head_dim));
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope base {} must exceed 1", self.rope_base));
        }
        if !(self.yarn_scale >= 1.0) {
            return bad(format!("yarn scale {} must be ≥ 1", self.yarn_scale));
        }
        if let Some(c) = self.dca_chunk {
            if c == 0 || c > self.max_position {
                return bad(format!("dca chunk {c} must lie in 1..={}", self.max_position));
            }
        }
        Ok(())
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads_q / self.n_heads_kv
    }

    /// KV head read by query head `h`.
    pub fn kv_head_for(&self, h: usize) -> usize {
        h / self.group_size()
    }

    pub fn q_width(&self) -> usize {
        self.n_heads_q * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_heads_kv * self.head_dim
    }
}
