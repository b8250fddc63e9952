use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::crossmap::{Cmt, FeatureDims, ModelConfig};
use crate::metrics::CaptionMetric;
use crate::numerics::{Adam, AdamMoments, Checkpoint, ParamStore, Tensor};
use crate::speaker::Cms;
use crate::textcodec::Vocabulary;

const AGENT_FORMAT: &str = "crossmap-agent/1";

#[derive(Serialize, Deserialize)]
struct AgentMeta {
    format: String,
    config: ModelConfig,
    dims: FeatureDims,
    metric: String,
    vocab: String,
    seed: u64,
    adam_step: u64,
    #[serde(default)]
    progress: Progress,
}

/// Completed training work, so a resumed run draws the same seeds as an
/// uninterrupted one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub dbt_rounds: usize,
}

/// Navigator and speaker sharing one parameter store and one optimizer.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub dims: FeatureDims,
    pub metric: CaptionMetric,
    pub seed: u64,
    pub store: ParamStore,
    pub cmt: Cmt,
    pub cms: Cms,
    pub optimizer: Adam,
    pub progress: Progress,
}

impl Agent {
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        dims: FeatureDims,
        metric: CaptionMetric,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cmt = Cmt::new(&mut store, &config, dims, vocab.len(), &mut rng)?;
        let cms = Cms::new(&mut store, &config, vocab.len(), &mut rng)?;
        let optimizer = Adam::new(config.adam());
        Ok(Self {
            config,
            vocab,
            dims,
            metric,
            seed,
            store,
            cmt,
            cms,
            optimizer,
            progress: Progress::default(),
        })
    }

    /// Parameters plus optimizer moments, with everything needed to rebuild
    /// the agent in the metadata.
    pub fn checkpoint(&self) -> Checkpoint {
        let meta = AgentMeta {
            format: AGENT_FORMAT.into(),
            config: self.config.clone(),
            dims: self.dims,
            metric: self.metric.id().into(),
            vocab: self.vocab.to_json(),
            seed: self.seed,
            adam_step: self.optimizer.steps_taken(),
            progress: self.progress,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).expect("metadata serializes"));
        for (id, name, t) in self.store.iter() {
            ck.push(name, t.clone());
            if let Some(m) = self.optimizer.moments(id.index()) {
                ck.push(format!("adam.m/{name}"), Tensor::new(vec![m.m.len()], m.m.clone()).expect("finite"));
                ck.push(format!("adam.v/{name}"), Tensor::new(vec![m.v.len()], m.v.clone()).expect("finite"));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let meta: AgentMeta =
            serde_json::from_value(ck.metadata.clone()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if meta.format != AGENT_FORMAT {
            return Err(TrainError::Checkpoint(format!("unsupported format {}", meta.format)));
        }
        let vocab = Vocabulary::from_json(&meta.vocab).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let metric = meta
            .metric
            .parse()
            .map_err(|e: crate::metrics::UnknownMetric| TrainError::Checkpoint(e.to_string()))?;
        let mut agent = Self::new(meta.config, vocab, meta.dims, metric, meta.seed)?;
        let mut moments = Vec::with_capacity(agent.store.len());
        let ids: Vec<_> = agent.store.ids().collect();
        for id in ids {
            let name = agent.store.name(id).to_string();
            let t = ck
                .tensor(&name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing tensor {name}")))?;
            agent.store.assign(id, t)?;
            let m = ck.tensor(&format!("adam.m/{name}"));
            let v = ck.tensor(&format!("adam.v/{name}"));
            moments.push(match (m, v) {
                (Some(m), Some(v)) => Some(AdamMoments {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                }),
                _ => None,
            });
        }
        agent.optimizer.restore(meta.adam_step, moments);
        agent.progress = meta.progress;
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        Ok(self.checkpoint().save(path.as_ref())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path.as_ref())?)
    }

    /// Checksum over the navigator parameters.
    pub fn cmt_checksum(&self) -> String {
        self.store.checksum("cmt.")
    }

    /// Checksum over the speaker parameters.
    pub fn cms_checksum(&self) -> String {
        self.store.checksum("cms.")
    }
}
