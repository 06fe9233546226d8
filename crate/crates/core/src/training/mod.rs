//! Toy-scale optimization: AdamW, supervised fine-tuning, strong-to-weak
//! distillation (off-policy data, on-policy logit KL) and GRPO.

mod config;
mod distill;
mod grpo;
mod optim;
mod sft;

pub use config::{MetricsRow, MetricsWriter, RunConfig, METRICS_HEADER};
pub use distill::{
    distill_eval, offpolicy_distill_dataset, onpolicy_distill_step, DistillEval, DistillPrompt, DistillReport,
    KlDirection, OffPolicySet,
};
pub use grpo::{
    group_advantages, grpo_step, sample_group, GrpoConfig, GrpoReport, RolloutGroup, DEFAULT_CLIP_EPS, DEFAULT_KL_COEF,
};
pub use optim::{AdamWConfig, OptimState};
pub use sft::{sft_eval, sft_loss, sft_step, SftExample, SftReport};
