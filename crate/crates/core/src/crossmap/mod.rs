//! The cross-modal navigation network: a language encoder and a visual
//! encoder that condition on each other at every step, and a causally
//! masked action decoder scoring the panoramic candidates.

mod check;
mod config;
pub(crate) mod layers;
mod masks;
mod model;
mod rollout;

pub use check::{end_to_end_gradcheck, tiny_world};
pub use config::{FeatureDims, ModelConfig};
pub use layers::{attention_block, AttentionParams, Linear, Pass};
pub use masks::{build_mask, MaskKind};
pub use model::{relative_view_angles, Cmt, StepState};
pub use rollout::{
    ground_truth_labels, path_loss, path_mask_loss, rollout, shortest_path_labels, trace, PathTrace, RolloutMode,
    TrajectoryRecord,
};

use crate::navworld::NavError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
}
