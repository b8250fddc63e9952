use rand_chacha::ChaCha8Rng;

use super::layers::{attention_block, AttentionParams, Linear, Pass};
use super::masks::{build_mask, MaskKind};
use super::{FeatureDims, ModelConfig, ModelError};
use crate::navworld::{candidate_actions, ActionCandidate, NavGraph, Pose, ViewFeature, NUM_VIEWS};
use crate::numerics::{NumericsError, ParamId, ParamStore, Tensor, Var};
use crate::textcodec::{EncodedInstruction, MAX_INSTR};

/// `[cos θ, sin θ, cos φ, sin φ]` of every view relative to the pose.
pub fn relative_view_angles(views: &[ViewFeature], pose: &Pose) -> Vec<[f64; 4]> {
    views
        .iter()
        .map(|v| {
            let theta = v.azimuth - pose.heading;
            let phi = v.elevation - pose.elevation;
            [theta.cos(), theta.sin(), phi.cos(), phi.sin()]
        })
        .collect()
}

/// Parameter handles of the navigator. The values live in a shared
/// [`ParamStore`] under the `cmt.` prefix.
#[derive(Clone, Debug)]
pub struct Cmt {
    pub dims: FeatureDims,
    pub vocab_size: usize,
    token_embedding: ParamId,
    token_position: ParamId,
    language: Vec<(AttentionParams, AttentionParams)>,
    view_projection: Linear,
    visual_summary: ParamId,
    visual: Vec<(AttentionParams, AttentionParams)>,
    action_projection: Linear,
    stop_feature: ParamId,
    start_action: ParamId,
    masked_action: ParamId,
    sequence_position: ParamId,
    decoder_first: AttentionParams,
    fuse: Linear,
    decoder_rest: Vec<AttentionParams>,
}

/// Encoder outputs at one pose.
#[derive(Clone, Debug)]
pub struct StepState {
    pub pose: Pose,
    /// Instruction summary, `1 × hidden`.
    pub h_l0: Var,
    /// Visual summary, `1 × hidden`.
    pub h_v0: Var,
    /// `h_l0 ⊕ h_v0`.
    pub context: Var,
    pub candidates: Vec<ActionCandidate>,
    /// Candidate embeddings, `candidates × hidden`.
    pub candidate_embedding: Var,
}

impl Cmt {
    pub fn new(
        store: &mut ParamStore,
        config: &ModelConfig,
        dims: FeatureDims,
        vocab_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let h = config.hidden;
        let ff = config.ff_size;
        let std = config.init_std;
        let feat = dims.width();
        let mut stack = |store: &mut ParamStore, name: &str| -> Result<Vec<(AttentionParams, AttentionParams)>, NumericsError> {
            (0..config.layers_per_stack)
                .map(|l| {
                    Ok((
                        AttentionParams::new(store, &format!("cmt.{name}.{l}.self"), h, ff, rng)?,
                        AttentionParams::new(store, &format!("cmt.{name}.{l}.cross"), h, ff, rng)?,
                    ))
                })
                .collect()
        };
        let language = stack(store, "lang")?;
        let visual = stack(store, "vis")?;
        let token_embedding = store.add_embedding("cmt.tok_emb", vocab_size, h, std, rng)?;
        let token_position = store.add_embedding("cmt.tok_pos", MAX_INSTR, h, std, rng)?;
        let view_projection = Linear::new(store, "cmt.view_proj", feat + 4, h, rng)?;
        let visual_summary = store.add_embedding("cmt.vis_summary", 1, h, std, rng)?;
        let action_projection = Linear::new(store, "cmt.act_proj", feat + 5, h, rng)?;
        let stop_feature = store.add_embedding("cmt.stop_feature", 1, feat, std, rng)?;
        let start_action = store.add_embedding("cmt.start_action", 1, h, std, rng)?;
        let masked_action = store.add_embedding("cmt.masked_action", 1, h, std, rng)?;
        let sequence_position = store.add_embedding("cmt.seq_pos", config.max_path + 1, h, std, rng)?;
        let decoder_first = AttentionParams::new(store, "cmt.dec.0", h, ff, rng)?;
        let fuse = Linear::new(store, "cmt.dec.fuse", 3 * h, h, rng)?;
        let decoder_rest = (1..config.layers_per_stack)
            .map(|l| AttentionParams::new(store, &format!("cmt.dec.{l}"), h, ff, rng))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            dims,
            vocab_size,
            token_embedding,
            token_position,
            language,
            view_projection,
            visual_summary,
            visual,
            action_projection,
            stop_feature,
            start_action,
            masked_action,
            sequence_position,
            decoder_first,
            fuse,
            decoder_rest,
        })
    }

    /// Token plus position embeddings for all 42 slots. Computed once per
    /// episode and reused at every step.
    pub fn embed_instruction(&self, pass: &mut Pass, instr: &EncodedInstruction) -> Result<Var, ModelError> {
        if let Some(&bad) = instr.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(ModelError::Input(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let table = pass.tape.param(self.token_embedding);
        let tokens = pass.tape.gather_rows(table, &instr.ids)?;
        let pos = pass.tape.param(self.token_position);
        let x = pass.tape.add(tokens, pos)?;
        Ok(pass.dropout(x)?)
    }

    /// The 36 views of the pose's node with relative angle features, after
    /// environmental dropout and projection to the hidden width.
    pub fn project_views(&self, pass: &mut Pass, graph: &NavGraph, pose: &Pose) -> Result<Var, ModelError> {
        let node = graph.node(pose.node);
        if node.views.len() != NUM_VIEWS {
            return Err(ModelError::Input(format!("node {} has {} views", node.id, node.views.len())));
        }
        let width = self.dims.width();
        let mut feats = Vec::with_capacity(NUM_VIEWS * width);
        for v in &node.views {
            if v.semantic.len() != self.dims.d_sem || v.visual.len() != self.dims.d_vis {
                return Err(ModelError::Input(format!("node {} view widths do not match the model", node.id)));
            }
            feats.extend_from_slice(&v.semantic);
            feats.extend_from_slice(&v.visual);
        }
        let angles: Vec<f64> = relative_view_angles(&node.views, pose).into_iter().flatten().collect();
        let feats = pass.tape.constant(Tensor::matrix(NUM_VIEWS, width, feats)?);
        let rate = pass.config.env_dropout;
        let feats = pass.tape.dropout_shared_cols(feats, rate, pass.rng, pass.training)?;
        let angles = pass.tape.constant(Tensor::matrix(NUM_VIEWS, 4, angles)?);
        let input = pass.tape.concat_cols(&[feats, angles])?;
        Ok(self.view_projection.apply(pass.tape, input)?)
    }

    /// Two layers of padded self-attention then cross-attention to the
    /// views. Returns all token states and the CLS row.
    pub fn encode_language(
        &self,
        pass: &mut Pass,
        tokens: Var,
        padding: &Tensor,
        views: Var,
    ) -> Result<(Var, Var), ModelError> {
        let mut x = tokens;
        for (self_attn, cross) in &self.language {
            x = attention_block(pass, self_attn, x, None, Some(padding))?;
            x = attention_block(pass, cross, x, Some(views), None)?;
        }
        let cls = pass.tape.slice_rows(x, 0, 1)?;
        Ok((x, cls))
    }

    /// A learned summary slot followed by the 36 views, through two layers of
    /// self-attention then cross-attention to the language states. Returns all
    /// slot states and the summary row.
    pub fn encode_visual(
        &self,
        pass: &mut Pass,
        views: Var,
        language: Var,
        padding: &Tensor,
    ) -> Result<(Var, Var), ModelError> {
        let summary = pass.tape.param(self.visual_summary);
        let mut v = pass.tape.concat_rows(&[summary, views])?;
        for (self_attn, cross) in &self.visual {
            v = attention_block(pass, self_attn, v, None, None)?;
            v = attention_block(pass, cross, v, Some(language), Some(padding))?;
        }
        let head = pass.tape.slice_rows(v, 0, 1)?;
        Ok((v, head))
    }

    /// Embeds candidates with the projection shared by decoder inputs.
    pub fn embed_candidates(&self, pass: &mut Pass, candidates: &[ActionCandidate]) -> Result<Var, ModelError> {
        let width = self.dims.width();
        let mut rows = Vec::with_capacity(candidates.len());
        for c in candidates {
            let row = match &c.feature {
                Some(f) => {
                    if f.len() != width {
                        return Err(ModelError::Input("candidate feature width mismatch".into()));
                    }
                    pass.tape.constant(Tensor::row(f.clone())?)
                }
                None => pass.tape.param(self.stop_feature),
            };
            rows.push(row);
        }
        let feats = pass.tape.concat_rows(&rows)?;
        let pos: Vec<f64> = candidates.iter().flat_map(|c| c.positional).collect();
        let pos = pass.tape.constant(Tensor::matrix(candidates.len(), 5, pos)?);
        let input = pass.tape.concat_cols(&[feats, pos])?;
        Ok(self.action_projection.apply(pass.tape, input)?)
    }

    /// Both encoders and the candidate set at one pose.
    pub fn step_state(
        &self,
        pass: &mut Pass,
        graph: &NavGraph,
        pose: Pose,
        tokens: Var,
        padding: &Tensor,
    ) -> Result<StepState, ModelError> {
        let views = self.project_views(pass, graph, &pose)?;
        let (lang, h_l0) = self.encode_language(pass, tokens, padding, views)?;
        let (_, h_v0) = self.encode_visual(pass, views, lang, padding)?;
        let context = pass.tape.concat_cols(&[h_l0, h_v0])?;
        let candidates = candidate_actions(graph, &pose);
        let candidate_embedding = self.embed_candidates(pass, &candidates)?;
        Ok(StepState {
            pose,
            h_l0,
            h_v0,
            context,
            candidates,
            candidate_embedding,
        })
    }

    pub fn start_action(&self, pass: &mut Pass) -> Var {
        pass.tape.param(self.start_action)
    }

    pub fn masked_action(&self, pass: &mut Pass) -> Var {
        pass.tape.param(self.masked_action)
    }

    /// Runs the decoder over `inputs` (one `1 × hidden` action embedding per
    /// position, the start embedding first) aligned with `contexts`. Returns
    /// the first-layer outputs `o_a` and the final outputs `h_a`, both
    /// `positions × hidden`.
    pub fn decode(
        &self,
        pass: &mut Pass,
        inputs: &[Var],
        contexts: &[Var],
        kind: MaskKind,
    ) -> Result<(Var, Var), ModelError> {
        let n = inputs.len();
        if n == 0 || n != contexts.len() {
            return Err(ModelError::Input(format!(
                "decoder got {n} inputs and {} contexts",
                contexts.len()
            )));
        }
        if n > pass.config.max_path + 1 {
            return Err(ModelError::Input(format!(
                "{n} decoder positions exceed max_path + 1 = {}",
                pass.config.max_path + 1
            )));
        }
        let seq = pass.tape.concat_rows(inputs)?;
        let table = pass.tape.param(self.sequence_position);
        let pos = pass.tape.slice_rows(table, 0, n)?;
        let x = pass.tape.add(seq, pos)?;
        let x = pass.dropout(x)?;
        let mask = build_mask(kind, n, n);
        let o_a = attention_block(pass, &self.decoder_first, x, None, Some(&mask))?;
        let ctx = pass.tape.concat_rows(contexts)?;
        let fused = pass.tape.concat_cols(&[o_a, ctx])?;
        let mut h = self.fuse.apply(pass.tape, fused)?;
        for layer in &self.decoder_rest {
            h = attention_block(pass, layer, h, None, Some(&mask))?;
        }
        Ok((o_a, h))
    }

    /// Unnormalized candidate scores `h_a(t) · embedding(candidate)`.
    pub fn candidate_logits(
        &self,
        pass: &mut Pass,
        h_a: Var,
        position: usize,
        candidate_embedding: Var,
    ) -> Result<Var, ModelError> {
        let row = pass.tape.slice_rows(h_a, position, 1)?;
        Ok(pass.tape.matmul_nt(row, candidate_embedding)?)
    }

    /// The decoder input for a taken action: the chosen candidate's
    /// embedding.
    pub fn action_input(&self, pass: &mut Pass, state: &StepState, choice: usize) -> Result<Var, ModelError> {
        if choice >= state.candidates.len() {
            return Err(ModelError::Input(format!(
                "choice {choice} out of {} candidates",
                state.candidates.len()
            )));
        }
        Ok(pass.tape.slice_rows(state.candidate_embedding, choice, 1)?)
    }
}
