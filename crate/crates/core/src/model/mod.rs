//! Dense and MoE decoder models: configuration, presets, weights, the forward
//! pass and the weight-file format.

mod config;
pub mod file;
mod forward;
mod presets;
mod weights;

pub use config::{parse_key_values, FeedForward, ModelConfig, ModelKind, ShapeAudit};
pub use file::{load, save};
pub use forward::{ForwardOutput, Model, ParamVars};
pub use presets::{preset, preset_names, preset_row, PresetRow, MOE_TOY_ALIAS, PRESET_TABLE, TOY_VOCAB_SIZE};
pub use weights::ModelWeights;
