use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loops::{finetune_epoch, references_by_path, run_epoch, Losses, Sample};
use super::{Agent, Dataset, TrainError};
use crate::crossmap::{rollout, RolloutMode, TrajectoryRecord};
use crate::metrics::CiderCorpus;
use crate::navworld::{Episode, NavGraph};
use crate::speaker::{score_generated, SpeakerMode};
use crate::textcodec::{EncodedInstruction, MAX_INSTR};

/// A speaker-generated instruction for a path with its filter score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstruction {
    pub episode_id: String,
    pub path: Vec<String>,
    pub text: String,
    pub ids: Vec<usize>,
    pub score: f64,
    pub metric: String,
    /// 2 for ground-truth paths, 3 for unlabeled paths.
    pub stage: u8,
}

/// Pools kept across back-translation rounds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DbtState {
    pub successful_trajectories: Vec<TrajectoryRecord>,
    pub generated_instructions: Vec<ScoredInstruction>,
    pub speaker_val_score: Option<f64>,
}

impl DbtState {
    pub fn admit_trajectory(&mut self, t: TrajectoryRecord) -> Result<(), TrainError> {
        if !t.success {
            return Err(TrainError::Invariant(format!(
                "trajectory {} entered the success pool without reaching its goal",
                t.episode_id
            )));
        }
        self.successful_trajectories.push(t);
        Ok(())
    }

    pub fn admit_instruction(&mut self, s: ScoredInstruction, threshold: f64) -> Result<(), TrainError> {
        if !(s.score >= threshold) {
            return Err(TrainError::Invariant(format!(
                "instruction for {} scored {} below the threshold {threshold}",
                s.episode_id, s.score
            )));
        }
        self.generated_instructions.push(s);
        Ok(())
    }
}

/// Items whose score reaches the threshold.
pub fn filter_by_threshold(items: &[ScoredInstruction], threshold: f64) -> Vec<&ScoredInstruction> {
    items.iter().filter(|s| s.score >= threshold).collect()
}

/// Pool sizes, scores and losses of one round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DbtLog {
    pub round: usize,
    pub threshold: f64,
    pub metric: String,
    pub stage1_rollouts: usize,
    pub stage1_pool: usize,
    pub stage1_speaker_loss: Vec<f64>,
    pub stage2_generated: usize,
    pub stage2_kept: usize,
    pub stage2_mean_score: f64,
    pub stage2_nav_loss: Vec<f64>,
    pub speaker_val_score: Option<f64>,
    pub stage3_gate: bool,
    pub stage3_generated: usize,
    pub stage3_kept: usize,
    pub stage3_nav_loss: Vec<f64>,
    pub cmt_checksum_before: String,
    pub cmt_checksum_after_stage1: String,
    pub cmt_checksum_after: String,
    pub cms_checksum_before: String,
    pub cms_checksum_after: String,
    pub notes: Vec<String>,
}

/// Datasets for one round.
pub struct DbtData<'a> {
    pub train: &'a Dataset,
    pub validation: Option<&'a Dataset>,
    pub unlabeled: Option<&'a Dataset>,
}

/// Greedy instruction for an episode's path, conditioned on the navigator's
/// teacher-forced latents. Returns the text and its token ids.
pub fn generate_for(agent: &Agent, graph: &NavGraph, ep: &Episode) -> Result<(String, Vec<usize>), TrainError> {
    let instr = agent.vocab.encode(&ep.instruction);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tf = rollout(&agent.cmt, &agent.store, &agent.config, graph, ep, &instr, RolloutMode::TeacherForced, &mut rng)?;
    let g = agent
        .cms
        .generate(&agent.store, &agent.config, &agent.vocab, &tf.latent_tensor()?, MAX_INSTR)?;
    Ok((g.text, g.ids))
}

fn generated_samples(pool: &[&ScoredInstruction], source: &[Episode]) -> Vec<Sample> {
    pool.iter()
        .map(|s| {
            let base = source
                .iter()
                .find(|e| e.id == s.episode_id)
                .expect("pool entries come from the source episodes");
            Sample {
                episode: Episode {
                    instruction: s.text.clone(),
                    ..base.clone()
                },
                instruction: EncodedInstruction::from_ids(&s.ids),
            }
        })
        .collect()
}

/// One double back-translation round:
///
/// 1. greedy rollouts on the training set; the successful ones train the
///    speaker on their latent features and original instruction;
/// 2. the speaker labels the training paths, instructions scoring at least
///    the threshold train the navigator;
/// 3. when the speaker's mean validation score reaches the threshold it
///    labels the unlabeled paths, which train the navigator.
///
/// Each stage trains for `epochs` epochs. Empty pools are logged and skipped.
/// Rounds are numbered by the agent's completed round count.
pub fn dbt_round(
    agent: &mut Agent,
    state: &mut DbtState,
    graph: &NavGraph,
    data: &DbtData,
    epochs: usize,
) -> Result<DbtLog, TrainError> {
    data.train.require_trainable()?;
    if let Some(u) = data.unlabeled {
        u.require_trainable()?;
    }
    let round = agent.progress.dbt_rounds;
    let threshold = agent.config.lambda_threshold;
    let metric = agent.metric.id().to_string();
    let round_tag = round.to_string();
    let mut log = DbtLog {
        round,
        threshold,
        metric: metric.clone(),
        cmt_checksum_before: agent.cmt_checksum(),
        cms_checksum_before: agent.cms_checksum(),
        ..DbtLog::default()
    };

    // Stage 1.
    let mut pool = Vec::new();
    for ep in &data.train.episodes {
        let instr = agent.vocab.encode(&ep.instruction);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout(&agent.cmt, &agent.store, &agent.config, graph, ep, &instr, RolloutMode::Greedy, &mut rng)?;
        log.stage1_rollouts += 1;
        if r.success {
            pool.push(r.clone());
            state.admit_trajectory(r)?;
        }
    }
    log.stage1_pool = pool.len();
    if pool.is_empty() {
        log.notes.push("stage 1: no successful rollouts, speaker not trained".into());
    } else {
        let samples: Vec<Sample> = pool
            .iter()
            .map(|r| Sample {
                episode: data
                    .train
                    .episodes
                    .iter()
                    .find(|e| e.id == r.episode_id)
                    .expect("rollouts come from the training set")
                    .clone(),
                instruction: agent.vocab.encode(&r.instruction),
            })
            .collect();
        let latents: Vec<_> = pool.iter().map(|r| r.latent_tensor()).collect::<Result<_, _>>()?;
        for epoch in 0..epochs {
            let tag = epoch.to_string();
            let (_, spk) = run_epoch(agent, &samples, &["dbt", &round_tag, "stage1", &tag], |ctx, s| {
                let i = samples
                    .iter()
                    .position(|x| x.episode.id == s.episode.id)
                    .expect("sample from this set");
                let lat = ctx.pass.tape.constant(latents[i].clone());
                let speaker = ctx
                    .cms
                    .loss(ctx.pass, lat, &s.instruction, SpeakerMode::for_batch(ctx.batch), ctx.rng)?;
                Ok(Losses { nav: None, speaker })
            })?;
            log.stage1_speaker_loss.push(spk);
        }
    }
    log.cmt_checksum_after_stage1 = agent.cmt_checksum();

    // Stage 2.
    let refs = references_by_path(&data.train.episodes);
    let ref_sets: Vec<Vec<String>> = data.train.episodes.iter().map(|e| refs[&e.path].clone()).collect();
    let corpus = CiderCorpus::new(&ref_sets);
    let mut generated = Vec::new();
    for ep in &data.train.episodes {
        let (text, ids) = generate_for(agent, graph, ep)?;
        let score = score_generated(&text, &refs[&ep.path], &metric, Some(&corpus))?;
        generated.push(ScoredInstruction {
            episode_id: ep.id.clone(),
            path: ep.path.clone(),
            text,
            ids,
            score,
            metric: metric.clone(),
            stage: 2,
        });
    }
    log.stage2_generated = generated.len();
    log.stage2_mean_score = if generated.is_empty() {
        0.0
    } else {
        generated.iter().map(|g| g.score).sum::<f64>() / generated.len() as f64
    };
    let kept = filter_by_threshold(&generated, threshold);
    log.stage2_kept = kept.len();
    for s in &kept {
        state.admit_instruction((*s).clone(), threshold)?;
    }
    if kept.is_empty() {
        log.notes.push(format!("stage 2: no instruction reached {threshold}, navigator not trained"));
    } else {
        let samples = generated_samples(&kept, &data.train.episodes);
        for epoch in 0..epochs {
            let tag = epoch.to_string();
            let nav = finetune_epoch(agent, graph, &samples, &["dbt", &round_tag, "stage2", &tag])?;
            log.stage2_nav_loss.push(nav);
        }
    }

    // Stage 3.
    let val_score = match data.validation {
        Some(v) if !v.episodes.is_empty() => {
            let vrefs = references_by_path(&v.episodes);
            let mut total = 0.0;
            for ep in &v.episodes {
                let (text, _) = generate_for(agent, graph, ep)?;
                total += score_generated(&text, &vrefs[&ep.path], &metric, Some(&corpus))?;
            }
            Some(total / v.episodes.len() as f64)
        }
        _ => None,
    };
    log.speaker_val_score = val_score;
    state.speaker_val_score = val_score;
    log.stage3_gate = val_score.is_some_and(|s| s >= threshold);
    match (log.stage3_gate, data.unlabeled) {
        (false, _) => log.notes.push(match val_score {
            Some(s) => format!("stage 3: speaker validation score {s} below {threshold}, skipped"),
            None => "stage 3: no validation split, skipped".into(),
        }),
        (true, None) => log.notes.push("stage 3: no unlabeled paths, skipped".into()),
        (true, Some(unlabeled)) => {
            let score = val_score.expect("gate implies a score");
            let mut labelled = Vec::new();
            for ep in &unlabeled.episodes {
                let (text, ids) = generate_for(agent, graph, ep)?;
                labelled.push(ScoredInstruction {
                    episode_id: ep.id.clone(),
                    path: ep.path.clone(),
                    text,
                    ids,
                    score,
                    metric: metric.clone(),
                    stage: 3,
                });
            }
            log.stage3_generated = labelled.len();
            let kept = filter_by_threshold(&labelled, threshold);
            log.stage3_kept = kept.len();
            for s in &kept {
                state.admit_instruction((*s).clone(), threshold)?;
            }
            if !kept.is_empty() {
                let samples = generated_samples(&kept, &unlabeled.episodes);
                for epoch in 0..epochs {
                    let tag = epoch.to_string();
                    let nav = finetune_epoch(agent, graph, &samples, &["dbt", &round_tag, "stage3", &tag])?;
                    log.stage3_nav_loss.push(nav);
                }
            }
        }
    }
    log.cmt_checksum_after = agent.cmt_checksum();
    log.cms_checksum_after = agent.cms_checksum();
    agent.progress.dbt_rounds += 1;
    Ok(log)
}
