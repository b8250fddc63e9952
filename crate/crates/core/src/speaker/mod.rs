//! The instruction generator: a two-layer transformer over instruction
//! tokens that cross-attends to the navigator's latent action features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossmap::{attention_block, build_mask, AttentionParams, Linear, MaskKind, ModelConfig, ModelError, Pass};
use crate::metrics::{CaptionMetric, CiderCorpus, UnknownMetric};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::textcodec::{EncodedInstruction, Vocabulary, CLS, EOS, MAX_INSTR, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerMode {
    CausalGen,
    BidirectionalMlm,
}

impl SpeakerMode {
    /// Even batches generate causally, odd batches fill in masked tokens.
    pub fn for_batch(index: usize) -> Self {
        if index % 2 == 0 {
            Self::CausalGen
        } else {
            Self::BidirectionalMlm
        }
    }
}

/// Parameter handles of the speaker, stored under the `cms.` prefix.
#[derive(Clone, Debug)]
pub struct Cms {
    pub vocab_size: usize,
    /// Id of the mask token; one past the vocabulary.
    pub mask_id: usize,
    token_embedding: ParamId,
    token_position: ParamId,
    latent_projection: Linear,
    latent_position: ParamId,
    layers: Vec<(AttentionParams, AttentionParams)>,
    head: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedInstruction {
    pub ids: Vec<usize>,
    pub text: String,
}

impl Cms {
    pub fn new(
        store: &mut ParamStore,
        config: &ModelConfig,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.hidden;
        let std = config.init_std;
        let token_embedding = store.add_embedding("cms.tok_emb", vocab_size + 1, h, std, rng)?;
        let token_position = store.add_embedding("cms.tok_pos", MAX_INSTR, h, std, rng)?;
        let latent_projection = Linear::new(store, "cms.lat_proj", h, h, rng)?;
        let latent_position = store.add_embedding("cms.lat_pos", config.max_path + 1, h, std, rng)?;
        let layers = (0..config.layers_per_stack)
            .map(|l| {
                Ok((
                    AttentionParams::new(store, &format!("cms.{l}.self"), h, config.ff_size, rng)?,
                    AttentionParams::new(store, &format!("cms.{l}.cross"), h, config.ff_size, rng)?,
                ))
            })
            .collect::<Result<_, ModelError>>()?;
        let head = Linear::new(store, "cms.head", h, vocab_size, rng)?;
        Ok(Self {
            vocab_size,
            mask_id: vocab_size,
            token_embedding,
            token_position,
            latent_projection,
            latent_position,
            layers,
            head,
        })
    }

    fn memory(&self, pass: &mut Pass, latents: Var) -> Result<Var, ModelError> {
        let n = pass.tape.value(latents).rows();
        if n == 0 {
            return Err(ModelError::Input("empty latent sequence".into()));
        }
        let table = pass.tape.param(self.latent_position);
        if n > pass.tape.value(table).rows() {
            return Err(ModelError::Input(format!(
                "{n} latent steps exceed max_path + 1 = {}",
                pass.tape.value(table).rows()
            )));
        }
        let x = self.latent_projection.apply(pass.tape, latents)?;
        let pos = pass.tape.slice_rows(table, 0, n)?;
        let x = pass.tape.add(x, pos)?;
        Ok(pass.dropout(x)?)
    }

    /// Vocabulary logits at every input position, `ids.len() × vocab`.
    pub fn logits(&self, pass: &mut Pass, ids: &[usize], latents: Var, kind: MaskKind) -> Result<Var, ModelError> {
        if ids.is_empty() || ids.len() > MAX_INSTR {
            return Err(ModelError::Input(format!("{} speaker positions", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id > self.mask_id) {
            return Err(ModelError::Input(format!("token id {bad} outside vocabulary")));
        }
        let memory = self.memory(pass, latents)?;
        let table = pass.tape.param(self.token_embedding);
        let tokens = pass.tape.gather_rows(table, ids)?;
        let pos = pass.tape.param(self.token_position);
        let pos = pass.tape.slice_rows(pos, 0, ids.len())?;
        let x = pass.tape.add(tokens, pos)?;
        let mut x = pass.dropout(x)?;
        let mask = match kind {
            MaskKind::Bidirectional => None,
            k => Some(build_mask(k, ids.len(), ids.len())),
        };
        for (self_attn, cross) in &self.layers {
            x = attention_block(pass, self_attn, x, None, mask.as_ref())?;
            x = attention_block(pass, cross, x, Some(memory), None)?;
        }
        Ok(self.head.apply(pass.tape, x)?)
    }

    /// Training loss for one instruction given the latent action features
    /// of its path. Returns `None` when the instruction has no content
    /// tokens to mask.
    pub fn loss(
        &self,
        pass: &mut Pass,
        latents: Var,
        target: &EncodedInstruction,
        mode: SpeakerMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<Var>, ModelError> {
        let latents = if pass.config.speaker_updates_cmt {
            latents
        } else {
            pass.tape.detach(latents)
        };
        let n = target.length;
        if n < 2 {
            return Err(ModelError::Input("target lacks CLS and EOS".into()));
        }
        match mode {
            SpeakerMode::CausalGen => {
                let logits = self.logits(pass, &target.ids[..n - 1], latents, MaskKind::Causal)?;
                Ok(Some(pass.tape.cross_entropy(logits, &target.ids[1..n])?))
            }
            SpeakerMode::BidirectionalMlm => {
                if n == 2 {
                    return Ok(None);
                }
                let rate = pass.config.mlm_rate;
                let masked = loop {
                    let picks: Vec<usize> = (1..n - 1).filter(|_| rng.random::<f64>() < rate).collect();
                    if !picks.is_empty() {
                        break picks;
                    }
                };
                let mut ids = target.ids[..n].to_vec();
                for &i in &masked {
                    ids[i] = self.mask_id;
                }
                let logits = self.logits(pass, &ids, latents, MaskKind::Bidirectional)?;
                let rows = masked
                    .iter()
                    .map(|&i| pass.tape.slice_rows(logits, i, 1))
                    .collect::<Result<Vec<_>, _>>()?;
                let picked = pass.tape.concat_rows(&rows)?;
                let labels: Vec<usize> = masked.iter().map(|&i| target.ids[i]).collect();
                Ok(Some(pass.tape.cross_entropy(picked, &labels)?))
            }
        }
    }

    /// Greedy decoding from CLS until EOS or `max_len` positions. PAD and
    /// CLS are never emitted.
    pub fn generate(
        &self,
        store: &ParamStore,
        config: &ModelConfig,
        vocab: &Vocabulary,
        latents: &Tensor,
        max_len: usize,
    ) -> Result<GeneratedInstruction, ModelError> {
        let max_len = max_len.clamp(2, MAX_INSTR);
        let mut ids = vec![CLS];
        let mut dropout_rng = rand::SeedableRng::seed_from_u64(0);
        while ids.len() < max_len {
            let mut tape = Tape::with_params(store, false);
            let mut pass = Pass {
                tape: &mut tape,
                rng: &mut dropout_rng,
                training: false,
                config,
            };
            let lat = pass.tape.constant(latents.clone());
            let logits = self.logits(&mut pass, &ids, lat, MaskKind::Causal)?;
            let last = pass.tape.value(logits).row_slice(ids.len() - 1);
            let mut best = None;
            for (id, &v) in last.iter().enumerate() {
                if id == PAD || id == CLS {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((id, v));
                }
            }
            let (next, _) = best.ok_or_else(|| ModelError::Input("vocabulary has no emittable token".into()))?;
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        let text = vocab
            .decode(&ids)
            .map_err(|e| ModelError::Input(e.to_string()))?;
        Ok(GeneratedInstruction { ids, text })
    }
}

/// Scores a generated instruction against its references with the given
/// metric. `corpus` supplies document frequencies for CIDEr; when absent the
/// references themselves are used.
pub fn score_generated(
    candidate: &str,
    references: &[String],
    metric: &str,
    corpus: Option<&CiderCorpus>,
) -> Result<f64, ModelError> {
    if references.is_empty() {
        return Err(ModelError::Input("no references to score against".into()));
    }
    let metric: CaptionMetric = metric.parse().map_err(|e: UnknownMetric| ModelError::Input(e.to_string()))?;
    let local;
    let corpus = match corpus {
        Some(c) => c,
        None => {
            local = CiderCorpus::new(&[references.to_vec()]);
            &local
        }
    };
    Ok(metric.score(candidate, references, corpus))
}
