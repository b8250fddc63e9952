use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Pass;
use super::masks::MaskKind;
use super::model::{Cmt, StepState};
use super::{ModelConfig, ModelError};
use crate::metrics::SUCCESS_RADIUS;
use crate::navworld::{step, Episode, NavGraph, NodeIx, Pose, StepOutcome};
use crate::numerics::kernels::softmax_rows;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::textcodec::EncodedInstruction;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Greedy,
    Sample,
    TeacherForced,
}

/// A generated trajectory with everything later stages need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub episode_id: String,
    pub instruction: String,
    /// Visited nodes, start first.
    pub nodes: Vec<String>,
    /// Chosen candidate index at every decision, the last being STOP unless
    /// truncated.
    pub actions: Vec<usize>,
    /// Candidate distribution at every decision.
    pub probabilities: Vec<Vec<f64>>,
    /// First decoder layer output per decision, `hidden` wide.
    pub latents: Vec<Vec<f64>>,
    pub truncated: bool,
    pub success: bool,
    /// Geodesic distance from the final node to the goal.
    pub ne: Option<f64>,
}

impl TrajectoryRecord {
    /// Candidate indices of the executed moves.
    pub fn moves(&self) -> &[usize] {
        &self.actions[..self.nodes.len() - 1]
    }

    pub fn latent_tensor(&self) -> Result<Tensor, ModelError> {
        Ok(Tensor::from_rows(&self.latents)?)
    }
}

/// Candidate indices along a ground-truth node path: the edge taken at every
/// node, then STOP at the last. Candidates follow adjacency order with STOP
/// last.
pub fn ground_truth_labels(graph: &NavGraph, path: &[NodeIx]) -> Result<Vec<usize>, ModelError> {
    let mut labels = Vec::with_capacity(path.len());
    for w in path.windows(2) {
        let idx = graph
            .edges(w[0])
            .iter()
            .position(|e| e.to == w[1])
            .ok_or_else(|| {
                ModelError::Input(format!(
                    "{} and {} are not adjacent",
                    graph.node(w[0]).id,
                    graph.node(w[1]).id
                ))
            })?;
        labels.push(idx);
    }
    let last = *path.last().ok_or_else(|| ModelError::Input("empty path".into()))?;
    labels.push(graph.edges(last).len());
    Ok(labels)
}

/// For each visited node, the first edge of a shortest path to `goal`, or
/// STOP at the goal itself.
pub fn shortest_path_labels(graph: &NavGraph, goal: NodeIx, visited: &[NodeIx]) -> Result<Vec<usize>, ModelError> {
    let tree = graph.shortest_paths_from(goal);
    visited
        .iter()
        .map(|&n| {
            if n == goal {
                return Ok(graph.edges(n).len());
            }
            let next = tree
                .predecessor(n)
                .ok_or_else(|| ModelError::Input(format!("goal unreachable from {}", graph.node(n).id)))?;
            Ok(graph
                .edges(n)
                .iter()
                .position(|e| e.to == next)
                .expect("tree edges exist in the graph"))
        })
        .collect()
}

/// Everything computed along a fixed sequence of moves.
pub struct PathTrace {
    pub states: Vec<StepState>,
    pub moves: Vec<usize>,
    /// First decoder layer outputs, `positions × hidden`.
    pub o_a: Var,
    pub h_a: Var,
    /// Candidate scores per position.
    pub logits: Vec<Var>,
}

impl PathTrace {
    pub fn visited(&self) -> Vec<NodeIx> {
        self.states.iter().map(|s| s.pose.node).collect()
    }

    /// Mean cross-entropy of the given labels over all positions.
    pub fn loss(&self, pass: &mut Pass, labels: &[usize]) -> Result<Var, ModelError> {
        if labels.len() != self.logits.len() {
            return Err(ModelError::Input(format!(
                "{} labels for {} positions",
                labels.len(),
                self.logits.len()
            )));
        }
        let terms = self
            .logits
            .iter()
            .zip(labels)
            .map(|(&l, &y)| pass.tape.cross_entropy(l, &[y]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(pass.tape.mean_of(&terms)?)
    }

    /// Cross-entropy at a single position.
    pub fn step_loss(&self, pass: &mut Pass, position: usize, label: usize) -> Result<Var, ModelError> {
        let logits = *self
            .logits
            .get(position)
            .ok_or_else(|| ModelError::Input(format!("no position {position}")))?;
        Ok(pass.tape.cross_entropy(logits, &[label])?)
    }
}

/// Runs both encoders at every pose reached by `moves` from `start` and the
/// decoder over the whole sequence in one pass.
///
/// With `masked = Some(m)` the decoder input recording move `m` is replaced
/// by a learned mask embedding and attention is bidirectional.
pub fn trace(
    cmt: &Cmt,
    pass: &mut Pass,
    graph: &NavGraph,
    instr: &EncodedInstruction,
    start: Pose,
    moves: &[usize],
    masked: Option<usize>,
) -> Result<PathTrace, ModelError> {
    let tokens = cmt.embed_instruction(pass, instr)?;
    let padding = instr.mask_row();
    let mut states = Vec::with_capacity(moves.len() + 1);
    let mut pose = start;
    for &choice in moves {
        let state = cmt.step_state(pass, graph, pose, tokens, &padding)?;
        let cand = state
            .candidates
            .get(choice)
            .ok_or_else(|| ModelError::Input(format!("move {choice} is not a candidate")))?;
        pose = match step(graph, &pose, cand)? {
            StepOutcome::Moved(p) => p,
            StepOutcome::Terminal => return Err(ModelError::Input("STOP inside a move sequence".into())),
        };
        states.push(state);
    }
    states.push(cmt.step_state(pass, graph, pose, tokens, &padding)?);

    let mut inputs = vec![cmt.start_action(pass)];
    for (j, &choice) in moves.iter().enumerate() {
        let input = if masked == Some(j) {
            cmt.masked_action(pass)
        } else {
            cmt.action_input(pass, &states[j], choice)?
        };
        inputs.push(input);
    }
    let contexts: Vec<Var> = states.iter().map(|s| s.context).collect();
    let kind = if masked.is_some() {
        MaskKind::Bidirectional
    } else {
        MaskKind::Causal
    };
    let (o_a, h_a) = cmt.decode(pass, &inputs, &contexts, kind)?;
    let logits = states
        .iter()
        .enumerate()
        .map(|(j, s)| cmt.candidate_logits(pass, h_a, j, s.candidate_embedding))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PathTrace {
        states,
        moves: moves.to_vec(),
        o_a,
        h_a,
        logits,
    })
}

fn episode_path(graph: &NavGraph, episode: &Episode) -> Result<Vec<NodeIx>, ModelError> {
    if episode.path.len() < 2 {
        return Err(ModelError::Input(format!("episode {} has a path shorter than 2", episode.id)));
    }
    Ok(graph.resolve_path(&episode.path)?)
}

/// Mean cross-entropy of the ground-truth actions, STOP included, under a
/// teacher-forced pass.
pub fn path_loss(
    cmt: &Cmt,
    pass: &mut Pass,
    graph: &NavGraph,
    episode: &Episode,
    instr: &EncodedInstruction,
) -> Result<Var, ModelError> {
    let path = episode_path(graph, episode)?;
    let labels = ground_truth_labels(graph, &path)?;
    let start = Pose::new(path[0], episode.start_heading);
    let tr = trace(cmt, pass, graph, instr, start, &labels[..labels.len() - 1], None)?;
    tr.loss(pass, &labels)
}

/// Cross-entropy of one ground-truth move at a position drawn uniformly from
/// the moves. Causal by default: only the moves before it are fed. Returns
/// the loss and the drawn position.
pub fn path_mask_loss(
    cmt: &Cmt,
    pass: &mut Pass,
    graph: &NavGraph,
    episode: &Episode,
    instr: &EncodedInstruction,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, usize), ModelError> {
    let path = episode_path(graph, episode)?;
    let labels = ground_truth_labels(graph, &path)?;
    let moves = &labels[..labels.len() - 1];
    let m = rng.random_range(0..moves.len());
    let start = Pose::new(path[0], episode.start_heading);
    let tr = if pass.config.path_mask_bidirectional {
        trace(cmt, pass, graph, instr, start, moves, Some(m))?
    } else {
        trace(cmt, pass, graph, instr, start, &moves[..m], None)?
    };
    Ok((tr.step_loss(pass, m, moves[m])?, m))
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn sample(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if r < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Steps a frozen model from the episode start until STOP or `max_path`
/// moves. Runs in evaluation mode without recording gradients.
pub fn rollout(
    cmt: &Cmt,
    store: &ParamStore,
    config: &ModelConfig,
    graph: &NavGraph,
    episode: &Episode,
    instr: &EncodedInstruction,
    mode: RolloutMode,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryRecord, ModelError> {
    let path = episode_path(graph, episode)?;
    let goal = *path.last().expect("checked length");
    let forced = match mode {
        RolloutMode::TeacherForced => {
            let labels = ground_truth_labels(graph, &path)?;
            if labels.len() > config.max_path + 1 {
                return Err(ModelError::Input(format!(
                    "episode {} has more than max_path = {} moves",
                    episode.id, config.max_path
                )));
            }
            Some(labels)
        }
        _ => None,
    };
    let mut tape = Tape::with_params(store, false);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
    let mut pass = Pass {
        tape: &mut tape,
        rng: &mut dropout_rng,
        training: false,
        config,
    };
    let tokens = cmt.embed_instruction(&mut pass, instr)?;
    let padding = instr.mask_row();
    let mut pose = Pose::new(path[0], episode.start_heading);
    let mut nodes = vec![graph.node(pose.node).id.clone()];
    let mut inputs = vec![cmt.start_action(&mut pass)];
    let mut contexts = Vec::new();
    let mut actions = Vec::new();
    let mut probabilities = Vec::new();
    let mut truncated = false;
    let mut o_a = None;
    for t in 0..=config.max_path {
        let state = cmt.step_state(&mut pass, graph, pose, tokens, &padding)?;
        contexts.push(state.context);
        let (o, h) = cmt.decode(&mut pass, &inputs, &contexts, MaskKind::Causal)?;
        o_a = Some(o);
        let logits = cmt.candidate_logits(&mut pass, h, t, state.candidate_embedding)?;
        let probs = softmax_rows(pass.tape.value(logits));
        let choice = match (&forced, mode) {
            (Some(labels), _) => labels[t],
            (None, RolloutMode::Sample) => sample(&probs, rng),
            _ => argmax(&probs),
        };
        probabilities.push(probs);
        actions.push(choice);
        let cand = &state.candidates[choice];
        if cand.is_stop() {
            break;
        }
        if t == config.max_path {
            truncated = true;
            break;
        }
        inputs.push(cmt.action_input(&mut pass, &state, choice)?);
        pose = match step(graph, &pose, cand)? {
            StepOutcome::Moved(p) => p,
            StepOutcome::Terminal => unreachable!("STOP handled above"),
        };
        nodes.push(graph.node(pose.node).id.clone());
    }
    let o_a = pass.tape.value(o_a.expect("at least one decision"));
    let latents = (0..o_a.rows()).map(|r| o_a.row_slice(r).to_vec()).collect();
    let ne = graph.shortest_paths_from(goal).distance(pose.node);
    Ok(TrajectoryRecord {
        episode_id: episode.id.clone(),
        instruction: episode.instruction.clone(),
        nodes,
        actions,
        probabilities,
        latents,
        truncated,
        success: !truncated && ne.is_some_and(|d| d <= SUCCESS_RADIUS),
        ne,
    })
}
