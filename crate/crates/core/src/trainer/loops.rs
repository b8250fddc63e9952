use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Agent, Dataset, TrainError};
use crate::crossmap::{
    ground_truth_labels, path_mask_loss, rollout, shortest_path_labels, trace, Cmt, ModelError, Pass, RolloutMode,
};
use crate::metrics::{nav_metrics, MetricsReport, NavOutcome};
use crate::navworld::{Episode, NavGraph, Pose};
use crate::numerics::{Gradients, ParamStore, Tape, Var};
use crate::speaker::{Cms, SpeakerMode};
use crate::textcodec::EncodedInstruction;

/// Loss summary for one epoch, written as one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub round: usize,
    pub epoch: usize,
    pub episodes: usize,
    pub nav_loss: f64,
    pub speaker_loss: f64,
    pub val_seen_sr: Option<f64>,
    pub val_unseen_sr: Option<f64>,
}

pub const EPOCH_CSV_HEADER: &str = "phase,round,epoch,episodes,nav_loss,speaker_loss,val_seen_sr,val_unseen_sr";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.phase,
            self.round,
            self.epoch,
            self.episodes,
            self.nav_loss,
            self.speaker_loss,
            opt(self.val_seen_sr),
            opt(self.val_unseen_sr)
        )
    }
}

pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&l.csv_row());
        out.push('\n');
    }
    out
}

/// One training example: an episode and the instruction to train on.
#[derive(Clone, Debug)]
pub struct Sample {
    pub episode: Episode,
    pub instruction: EncodedInstruction,
}

impl Sample {
    pub fn encode(agent: &Agent, episodes: &[Episode]) -> Vec<Self> {
        episodes
            .iter()
            .map(|e| Self {
                episode: e.clone(),
                instruction: agent.vocab.encode(&e.instruction),
            })
            .collect()
    }
}

/// Losses of one example. Either may be absent.
pub(crate) struct Losses {
    pub nav: Option<Var>,
    pub speaker: Option<Var>,
}

pub(crate) struct StepContext<'a, 'b, 'p> {
    pub pass: &'a mut Pass<'b, 'p>,
    pub store: &'p ParamStore,
    pub cmt: &'a Cmt,
    pub cms: &'a Cms,
    pub rng: &'a mut ChaCha8Rng,
    pub batch: usize,
}

/// Shuffles, batches, and applies one Adam step per batch with the mean
/// gradient over its examples. Returns the mean nav and speaker losses.
pub(crate) fn run_epoch<F>(
    agent: &mut Agent,
    samples: &[Sample],
    labels: &[&str],
    mut per_example: F,
) -> Result<(f64, f64), TrainError>
where
    F: FnMut(&mut StepContext, &Sample) -> Result<Losses, ModelError>,
{
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(agent.seed, labels)));
    let (mut nav_sum, mut nav_n, mut spk_sum, mut spk_n) = (0.0, 0usize, 0.0, 0usize);
    let batch_size = agent.config.batch_size;
    for (batch, chunk) in order.chunks(batch_size).enumerate() {
        let mut total = Gradients::new(agent.store.len());
        let mut contributed = 0usize;
        for &i in chunk {
            let sample = &samples[i];
            let mut ex_labels: Vec<&str> = labels.to_vec();
            ex_labels.push(&sample.episode.id);
            let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(agent.seed, &[&ex_labels[..], &["dropout"]].concat()));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(agent.seed, &[&ex_labels[..], &["draw"]].concat()));
            let mut tape = Tape::with_params(&agent.store, true);
            let mut pass = Pass {
                tape: &mut tape,
                rng: &mut drop_rng,
                training: true,
                config: &agent.config,
            };
            let mut ctx = StepContext {
                pass: &mut pass,
                store: &agent.store,
                cmt: &agent.cmt,
                cms: &agent.cms,
                rng: &mut rng,
                batch,
            };
            let losses = per_example(&mut ctx, sample)?;
            let mut parts = Vec::new();
            for (loss, sum, n) in [
                (losses.nav, &mut nav_sum, &mut nav_n),
                (losses.speaker, &mut spk_sum, &mut spk_n),
            ] {
                if let Some(l) = loss {
                    let v = tape.value(l).item();
                    if !v.is_finite() {
                        return Err(TrainError::NonFinite {
                            what: labels.join("/"),
                            episode: sample.episode.id.clone(),
                        });
                    }
                    *sum += v;
                    *n += 1;
                    parts.push(l);
                }
            }
            let loss = match parts.as_slice() {
                [] => continue,
                [one] => *one,
                [a, b] => tape.add(*a, *b)?,
                _ => unreachable!("at most two parts"),
            };
            if !tape.requires_grad(loss) {
                continue;
            }
            tape.backward(loss)?;
            total.accumulate(&tape.param_grads());
            contributed += 1;
        }
        if contributed > 0 {
            total.scale(1.0 / contributed as f64);
            agent.optimizer.step(&mut agent.store, &total)?;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(nav_sum, nav_n), mean(spk_sum, spk_n)))
}

fn episode_nodes(graph: &NavGraph, ep: &Episode) -> Result<Vec<crate::navworld::NodeIx>, ModelError> {
    Ok(crate::navworld::check_episode(graph, ep)?)
}

/// Path-masking plus speaker loss on teacher-forced latents.
pub(crate) fn pretrain_example(
    ctx: &mut StepContext,
    graph: &NavGraph,
    sample: &Sample,
    path_masking: bool,
) -> Result<Losses, ModelError> {
    let ep = &sample.episode;
    let path = episode_nodes(graph, ep)?;
    let labels = ground_truth_labels(graph, &path)?;
    let moves = &labels[..labels.len() - 1];
    let start = Pose::new(path[0], ep.start_heading);
    let tr = trace(ctx.cmt, ctx.pass, graph, &sample.instruction, start, moves, None)?;
    let nav = if !path_masking {
        None
    } else if ctx.pass.config.path_mask_bidirectional {
        Some(path_mask_loss(ctx.cmt, ctx.pass, graph, ep, &sample.instruction, ctx.rng)?.0)
    } else {
        // Under the causal mask the step-m logits of the full trace depend
        // only on moves before m.
        let m = ctx.rng.random_range(0..moves.len());
        Some(tr.step_loss(ctx.pass, m, moves[m])?)
    };
    let speaker = ctx.cms.loss(
        ctx.pass,
        tr.o_a,
        &sample.instruction,
        SpeakerMode::for_batch(ctx.batch),
        ctx.rng,
    )?;
    Ok(Losses { nav, speaker })
}

/// Sampled exploration, then cross-entropy against the shortest-path next
/// action at every visited node.
pub(crate) fn finetune_example(ctx: &mut StepContext, graph: &NavGraph, sample: &Sample) -> Result<Losses, ModelError> {
    let ep = &sample.episode;
    let path = episode_nodes(graph, ep)?;
    let goal = *path.last().expect("checked length");
    let record = rollout(
        ctx.cmt,
        ctx.store,
        ctx.pass.config,
        graph,
        ep,
        &sample.instruction,
        RolloutMode::Sample,
        ctx.rng,
    )?;
    let start = Pose::new(path[0], ep.start_heading);
    let tr = trace(ctx.cmt, ctx.pass, graph, &sample.instruction, start, record.moves(), None)?;
    let labels = shortest_path_labels(graph, goal, &tr.visited())?;
    Ok(Losses {
        nav: Some(tr.loss(ctx.pass, &labels)?),
        speaker: None,
    })
}

/// Joint pretraining of navigator and speaker on ground-truth paths.
pub fn pretrain(
    agent: &mut Agent,
    graph: &NavGraph,
    train: &Dataset,
    epochs: usize,
    path_masking: bool,
) -> Result<Vec<EpochLog>, TrainError> {
    train.require_trainable()?;
    let samples = Sample::encode(agent, &train.episodes);
    let mut logs = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = agent.progress.pretrain_epochs;
        let tag = epoch.to_string();
        let (nav, spk) = run_epoch(agent, &samples, &["pretrain", &tag], |ctx, s| {
            pretrain_example(ctx, graph, s, path_masking)
        })?;
        agent.progress.pretrain_epochs += 1;
        logs.push(EpochLog {
            phase: "pretrain".into(),
            round: 0,
            epoch,
            episodes: samples.len(),
            nav_loss: nav,
            speaker_loss: spk,
            val_seen_sr: None,
            val_unseen_sr: None,
        });
    }
    Ok(logs)
}

/// One finetuning epoch over prepared samples.
pub(crate) fn finetune_epoch(
    agent: &mut Agent,
    graph: &NavGraph,
    samples: &[Sample],
    labels: &[&str],
) -> Result<f64, TrainError> {
    Ok(run_epoch(agent, samples, labels, |ctx, s| finetune_example(ctx, graph, s))?.0)
}

/// Finetuning with sampled exploration. Greedy success rate on each
/// validation split is recorded after every epoch.
pub fn finetune(
    agent: &mut Agent,
    graph: &NavGraph,
    train: &Dataset,
    validation: &[&Dataset],
    epochs: usize,
) -> Result<Vec<EpochLog>, TrainError> {
    train.require_trainable()?;
    let samples = Sample::encode(agent, &train.episodes);
    let mut logs = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let epoch = agent.progress.finetune_epochs;
        let tag = epoch.to_string();
        let nav = finetune_epoch(agent, graph, &samples, &["finetune", &tag])?;
        agent.progress.finetune_epochs += 1;
        let mut log = EpochLog {
            phase: "finetune".into(),
            round: 0,
            epoch,
            episodes: samples.len(),
            nav_loss: nav,
            speaker_loss: 0.0,
            val_seen_sr: None,
            val_unseen_sr: None,
        };
        for v in validation {
            let sr = evaluate(agent, graph, &v.episodes, Policy::Greedy)?.sr;
            match v.role {
                super::DatasetRole::ValUnseen => log.val_unseen_sr = Some(sr),
                _ => log.val_seen_sr = Some(sr),
            }
        }
        logs.push(log);
    }
    Ok(logs)
}

/// How evaluation picks actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Greedy,
    /// Samples with a per-episode seed derived from the agent seed.
    Sample,
    /// Follows the ground-truth path.
    Oracle,
    /// Stops immediately.
    AlwaysStop,
}

/// Outcomes of running a policy over episodes.
pub fn run_policy(
    agent: &Agent,
    graph: &NavGraph,
    episodes: &[Episode],
    policy: Policy,
) -> Result<Vec<NavOutcome>, TrainError> {
    episodes
        .iter()
        .map(|ep| {
            let path = match policy {
                Policy::Oracle => ep.path.clone(),
                Policy::AlwaysStop => vec![ep.path[0].clone()],
                Policy::Greedy | Policy::Sample => {
                    let mode = if policy == Policy::Greedy {
                        RolloutMode::Greedy
                    } else {
                        RolloutMode::Sample
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(agent.seed, &["evaluate", &ep.id]));
                    let instr = agent.vocab.encode(&ep.instruction);
                    let r = rollout(&agent.cmt, &agent.store, &agent.config, graph, ep, &instr, mode, &mut rng)?;
                    return Ok(NavOutcome {
                        episode_id: ep.id.clone(),
                        path: r.nodes,
                        goal: ep.goal().to_string(),
                        truncated: r.truncated,
                    });
                }
            };
            Ok(NavOutcome {
                episode_id: ep.id.clone(),
                path,
                goal: ep.goal().to_string(),
                truncated: false,
            })
        })
        .collect()
}

pub fn evaluate(agent: &Agent, graph: &NavGraph, episodes: &[Episode], policy: Policy) -> Result<MetricsReport, TrainError> {
    let outcomes = run_policy(agent, graph, episodes, policy)?;
    Ok(nav_metrics(graph, &outcomes)?)
}

/// Fraction of ground-truth decisions, STOP included, that the model ranks
/// first when fed the ground-truth history.
pub fn teacher_forced_accuracy(agent: &Agent, graph: &NavGraph, episodes: &[Episode]) -> Result<f64, TrainError> {
    let (mut hit, mut total) = (0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ep in episodes {
        let instr = agent.vocab.encode(&ep.instruction);
        let r = rollout(&agent.cmt, &agent.store, &agent.config, graph, ep, &instr, RolloutMode::TeacherForced, &mut rng)?;
        for (p, &a) in r.probabilities.iter().zip(&r.actions) {
            let best = p
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > p[b] { i } else { b });
            hit += usize::from(best == a);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Groups reference instructions by path so each generated instruction is
/// scored against every human instruction for the same route.
pub(crate) fn references_by_path(episodes: &[Episode]) -> HashMap<Vec<String>, Vec<String>> {
    let mut map: HashMap<Vec<String>, Vec<String>> = HashMap::new();
    for ep in episodes {
        map.entry(ep.path.clone()).or_default().push(ep.instruction.clone());
    }
    map
}
