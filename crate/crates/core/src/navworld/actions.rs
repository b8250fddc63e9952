use super::{signed_angle, view_index_for, NavError, NavGraph, NodeIx, Pose};

/// Positional encoding of STOP: zero azimuth, elevation and distance.
pub const STOP_POSITIONAL: [f64; 5] = [1.0, 0.0, 1.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateKind {
    /// Traverse the outgoing edge at `edge` in the node's adjacency list.
    Move { edge: usize, to: NodeIx },
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionCandidate {
    pub kind: CandidateKind,
    /// Semantic ⊕ visual feature of the view facing the edge; `None` for STOP,
    /// whose feature is learned by the model.
    pub feature: Option<Vec<f64>>,
    /// `[cos θ, sin θ, cos φ, sin φ, ρ]` relative to the current pose.
    pub positional: [f64; 5],
}

impl ActionCandidate {
    pub fn is_stop(&self) -> bool {
        self.kind == CandidateKind::Stop
    }

    pub fn destination(&self) -> Option<NodeIx> {
        match self.kind {
            CandidateKind::Move { to, .. } => Some(to),
            CandidateKind::Stop => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Moved(Pose),
    Terminal,
}

/// One candidate per outgoing edge in adjacency order, then STOP last.
pub fn candidate_actions(graph: &NavGraph, pose: &Pose) -> Vec<ActionCandidate> {
    let node = graph.node(pose.node);
    let mut out = Vec::with_capacity(graph.edges(pose.node).len() + 1);
    for (i, e) in graph.edges(pose.node).iter().enumerate() {
        let theta = signed_angle(e.azimuth - pose.heading);
        let phi = e.elevation - pose.elevation;
        let view = view_index_for(e.azimuth, e.elevation);
        out.push(ActionCandidate {
            kind: CandidateKind::Move { edge: i, to: e.to },
            feature: Some(node.views[view].concat()),
            positional: [theta.cos(), theta.sin(), phi.cos(), phi.sin(), e.distance],
        });
    }
    out.push(ActionCandidate {
        kind: CandidateKind::Stop,
        feature: None,
        positional: STOP_POSITIONAL,
    });
    out
}

/// Applies an action. Moving sets the heading to the traversed edge's
/// azimuth; STOP ends the episode.
pub fn step(graph: &NavGraph, pose: &Pose, action: &ActionCandidate) -> Result<StepOutcome, NavError> {
    match action.kind {
        CandidateKind::Stop => Ok(StepOutcome::Terminal),
        CandidateKind::Move { edge, to } => {
            let e = graph
                .edges(pose.node)
                .get(edge)
                .filter(|e| e.to == to)
                .ok_or_else(|| NavError::NotACandidate {
                    node: graph.node(pose.node).id.clone(),
                })?;
            Ok(StepOutcome::Moved(Pose::new(e.to, e.azimuth)))
        }
    }
}
