//! HAT-Net backbones: configuration, parameter layout, forward pass and
//! weights files.

mod config;
mod model;
mod weights;

pub use config::{
    stage_name, AttentionKind, GridSchedule, ModelConfig, StageConfig, StemConv, Variant,
};
pub use model::{ForwardVars, LossAndGrads, Model, ParamKind, ParamLayout, ParamSpec};
pub use weights::{load_weights, save_weights, WeightsBundle, MAGIC, VERSION};
