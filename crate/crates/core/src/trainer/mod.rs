//! Training loops: joint pretraining on ground-truth paths, finetuning with
//! sampled exploration, double back-translation, and evaluation.

mod agent;
mod dbt;
mod loops;
mod plan;

pub use agent::{Agent, Progress};
pub use dbt::{dbt_round, filter_by_threshold, generate_for, DbtData, DbtLog, DbtState, ScoredInstruction};
pub use loops::{
    epoch_csv, evaluate, finetune, pretrain, run_policy, teacher_forced_accuracy, EpochLog, Policy, Sample,
    EPOCH_CSV_HEADER,
};
pub use plan::{derive_seed, DataRefs, Dataset, DatasetRole, Phase, TrainPlan, PLAN_VERSION};

use crate::crossmap::ModelError;
use crate::navworld::NavError;
use crate::numerics::NumericsError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Nav(#[from] NavError),
    #[error("invalid plan: {}", .0.join("; "))]
    Plan(Vec<String>),
    #[error("{0:?} episodes cannot be used for training")]
    Role(DatasetRole),
    #[error("non-finite loss in {what} on episode {episode}")]
    NonFinite { what: String, episode: String },
    #[error("pool invariant violated: {0}")]
    Invariant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests;
