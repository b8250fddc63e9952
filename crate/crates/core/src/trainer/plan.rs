use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::crossmap::ModelConfig;
use crate::metrics::CaptionMetric;
use crate::navworld::Episode;

pub const PLAN_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
    Dbt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Dbt => "dbt",
        }
    }
}

/// Where an episode set may be used. Validation splits never produce
/// gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    ValSeen,
    ValUnseen,
    Unlabeled,
}

impl DatasetRole {
    pub fn trainable(self) -> bool {
        matches!(self, Self::Train | Self::Unlabeled)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: DatasetRole,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(role: DatasetRole, episodes: Vec<Episode>) -> Self {
        Self { role, episodes }
    }

    pub(crate) fn require_trainable(&self) -> Result<(), TrainError> {
        if self.role.trainable() {
            Ok(())
        } else {
            Err(TrainError::Role(self.role))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRefs {
    pub world: PathBuf,
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_seen: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_unseen: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<PathBuf>,
}

fn default_version() -> u32 {
    PLAN_VERSION
}

fn default_metric() -> String {
    CaptionMetric::Cider.id().to_string()
}

fn default_rounds() -> usize {
    2
}

fn default_true() -> bool {
    true
}

/// One training phase as read from a plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    #[serde(default = "default_version")]
    pub version: u32,
    pub phase: Phase,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub config: ModelConfig,
    pub data: DataRefs,
    /// Caption metric used to filter generated instructions.
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_rounds")]
    pub dbt_rounds: usize,
    /// Train the navigator on masked ground-truth actions during
    /// pretraining. Off gives the speaker-only pretraining ablation.
    #[serde(default = "default_true")]
    pub path_masking: bool,
    /// Checkpoint to start from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
}

impl TrainPlan {
    /// Paths are resolved against `base` when relative.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.world);
        fix(&mut self.data.train);
        for p in [&mut self.data.val_seen, &mut self.data.val_unseen, &mut self.data.unlabeled, &mut self.init]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Lists every offending key.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if self.version != PLAN_VERSION {
            bad.push(format!("version: unsupported {}", self.version));
        }
        if self.epochs == 0 {
            bad.push("epochs: must be at least 1".into());
        }
        if let Err(e) = self.config.validate() {
            bad.push(format!("config: {e}"));
        }
        if self.metric.parse::<CaptionMetric>().is_err() {
            bad.push(format!("metric: unknown metric {:?}", self.metric));
        }
        if self.phase == Phase::Dbt && self.dbt_rounds == 0 {
            bad.push("dbt_rounds: must be at least 1".into());
        }
        let mut check = |key: &str, p: &Path| {
            if !p.exists() {
                bad.push(format!("{key}: {} does not exist", p.display()));
            }
        };
        check("data.world", &self.data.world);
        check("data.train", &self.data.train);
        for (key, p) in [
            ("data.val_seen", &self.data.val_seen),
            ("data.val_unseen", &self.data.val_unseen),
            ("data.unlabeled", &self.data.unlabeled),
            ("init", &self.init),
        ] {
            if let Some(p) = p {
                check(key, p);
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Plan(bad))
        }
    }
}

/// Stable per-purpose seed: the first 8 bytes of SHA-256 over the global
/// seed and the labels.
pub fn derive_seed(global: u64, labels: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
