//! Discretized navigation environments: graphs of panoramic waypoints,
//! synthetic world and episode generation, geodesic distances, the
//! panoramic action space and file formats.

mod actions;
mod episodes;
mod generate;
mod graph;
mod io;

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

pub use actions::{candidate_actions, step, ActionCandidate, CandidateKind, StepOutcome, STOP_POSITIONAL};
pub use episodes::{generate_episodes, render_instruction, EpisodeSpec, TemplateGrammar};
pub use generate::{generate_world, NodeAnnotation, World, WorldSpec, DEFAULT_LANDMARKS, DEFAULT_ROOMS};
pub use graph::{DistanceTable, NavGraph, ShortestPaths};
pub use io::{
    check_episode, load_episodes, load_r2r_json, load_world, parse_r2r, save_episodes, save_world, world_from_json,
    world_to_json, WORLD_FORMAT_VERSION,
};

/// Views per panorama: 3 elevation tiers × 12 azimuths.
pub const NUM_VIEWS: usize = 36;
pub const AZIMUTH_BINS: usize = 12;
pub const ELEVATION_TIERS: usize = 3;
/// Angular spacing of the view tiling (30°).
pub const VIEW_STEP: f64 = PI / 6.0;

#[derive(Debug, thiserror::Error)]
pub enum NavError {
    #[error("unknown node id {0}")]
    UnknownNode(String),
    #[error("world generation failed: {0}")]
    Generation(String),
    #[error("no endpoint pair with {requested_min}..={requested_max} edges and goal beyond {min_distance} m; achievable edge counts {achievable_min}..={achievable_max}")]
    NoEpisodePair {
        requested_min: usize,
        requested_max: usize,
        min_distance: f64,
        achievable_min: usize,
        achievable_max: usize,
    },
    #[error("invalid episode {id}: {reason}")]
    InvalidEpisode { id: String, reason: String },
    #[error("graph invariant violated: {0}")]
    Invariant(String),
    #[error("action is not a candidate at node {node}")]
    NotACandidate { node: String },
    #[error("record {index}: field `{field}`: {reason}")]
    Record {
        index: usize,
        field: String,
        reason: String,
    },
    #[error("world file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Dense index of a node inside one [`NavGraph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeIx(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFeature {
    pub semantic: Vec<f64>,
    pub visual: Vec<f64>,
    pub azimuth: f64,
    pub elevation: f64,
}

impl ViewFeature {
    /// `semantic ⊕ visual`.
    pub fn concat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.semantic.len() + self.visual.len());
        v.extend_from_slice(&self.semantic);
        v.extend_from_slice(&self.visual);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavNode {
    pub id: String,
    pub position: [f64; 3],
    pub views: Vec<ViewFeature>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavEdge {
    pub from: NodeIx,
    pub to: NodeIx,
    /// World-frame heading of the edge, clockwise from +y, in `[0, 2π)`.
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

/// One instruction paired with a ground-truth path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub graph_id: String,
    pub instruction: String,
    pub path: Vec<String>,
    #[serde(default)]
    pub start_heading: f64,
}

impl Episode {
    pub fn goal(&self) -> &str {
        self.path.last().expect("episode path is never empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub node: NodeIx,
    pub heading: f64,
    pub elevation: f64,
}

impl Pose {
    pub fn new(node: NodeIx, heading: f64) -> Self {
        Self {
            node,
            heading: wrap_angle(heading),
            elevation: 0.0,
        }
    }
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Signed angle in `(−π, π]`; positive is clockwise (to the right).
pub fn signed_angle(a: f64) -> f64 {
    let w = wrap_angle(a);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Azimuth and elevation of the view with the given panorama index.
pub fn view_angles(index: usize) -> (f64, f64) {
    let tier = index / AZIMUTH_BINS;
    let k = index % AZIMUTH_BINS;
    (k as f64 * VIEW_STEP, (tier as f64 - 1.0) * VIEW_STEP)
}

/// Panorama index of the view that best covers a world-frame direction.
pub fn view_index_for(azimuth: f64, elevation: f64) -> usize {
    let k = (wrap_angle(azimuth) / VIEW_STEP).round() as usize % AZIMUTH_BINS;
    let tier = if elevation > VIEW_STEP / 2.0 {
        2
    } else if elevation < -VIEW_STEP / 2.0 {
        0
    } else {
        1
    };
    tier * AZIMUTH_BINS + k
}

#[cfg(test)]
mod tests;
