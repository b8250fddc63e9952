use serde::{Deserialize, Serialize};

use crate::navworld::{DistanceTable, NavError, NavGraph, NodeIx};

pub const REPORT_VERSION: u32 = 1;
/// Arrival radius for success, in meters.
pub const SUCCESS_RADIUS: f64 = 3.0;

/// One generated trajectory to score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavOutcome {
    pub episode_id: String,
    /// Visited nodes in order, starting at the start node.
    pub path: Vec<String>,
    pub goal: String,
    /// The rollout hit its step limit without stopping; scored as failure.
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: String,
    pub success: bool,
    pub oracle_success: bool,
    /// Final geodesic distance to the goal; `None` when unreachable.
    pub ne: Option<f64>,
    pub spl: f64,
    pub path_length: f64,
    pub shortest_length: Option<f64>,
    pub truncated: bool,
    pub unreachable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub count: usize,
    pub sr: f64,
    /// Mean over episodes whose goal is reachable.
    pub ne: f64,
    pub spl: f64,
    pub osr: f64,
    pub unreachable: usize,
    pub episodes: Vec<EpisodeScore>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One header line and one summary row.
    pub fn to_csv(&self, label: &str) -> String {
        format!(
            "split,count,sr,ne,spl,osr\n{label},{},{},{},{},{}\n",
            self.count, self.sr, self.ne, self.spl, self.osr
        )
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores one outcome given geodesic distances.
pub fn score_outcome(
    graph: &NavGraph,
    table: &DistanceTable,
    outcome: &NavOutcome,
    radius: f64,
) -> Result<EpisodeScore, NavError> {
    let path = graph.resolve_path(&outcome.path)?;
    let goal = graph.ix(&outcome.goal)?;
    let (&start, &last) = match (path.first(), path.last()) {
        (Some(s), Some(l)) => (s, l),
        _ => {
            return Err(NavError::InvalidEpisode {
                id: outcome.episode_id.clone(),
                reason: "empty trajectory".into(),
            })
        }
    };
    let path_length = graph.path_length(&path).ok_or_else(|| NavError::InvalidEpisode {
        id: outcome.episode_id.clone(),
        reason: "trajectory steps between non-adjacent nodes".into(),
    })?;
    let final_dist = table.get(last, goal);
    let shortest = table.get(start, goal);
    let success = !outcome.truncated && final_dist.is_some_and(|d| d <= radius);
    let oracle_success = path
        .iter()
        .any(|&n: &NodeIx| table.get(n, goal).is_some_and(|d| d <= radius));
    let spl = match (success, shortest) {
        (true, Some(l_star)) => {
            let denom = path_length.max(l_star);
            if denom == 0.0 {
                1.0
            } else {
                l_star / denom
            }
        }
        _ => 0.0,
    };
    Ok(EpisodeScore {
        episode_id: outcome.episode_id.clone(),
        success,
        oracle_success,
        ne: final_dist,
        spl,
        path_length,
        shortest_length: shortest,
        truncated: outcome.truncated,
        unreachable: final_dist.is_none(),
    })
}

pub fn nav_metrics(graph: &NavGraph, outcomes: &[NavOutcome]) -> Result<MetricsReport, NavError> {
    nav_metrics_with(graph, &graph.distance_table(), outcomes, SUCCESS_RADIUS)
}

pub fn nav_metrics_with(
    graph: &NavGraph,
    table: &DistanceTable,
    outcomes: &[NavOutcome],
    radius: f64,
) -> Result<MetricsReport, NavError> {
    let episodes = outcomes
        .iter()
        .map(|o| score_outcome(graph, table, o, radius))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(episodes))
}

pub fn aggregate(episodes: Vec<EpisodeScore>) -> MetricsReport {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    MetricsReport {
        version: REPORT_VERSION,
        count: episodes.len(),
        sr: mean(episodes.iter().map(|e| flag(e.success))),
        ne: mean(episodes.iter().filter_map(|e| e.ne)),
        spl: mean(episodes.iter().map(|e| e.spl)),
        osr: mean(episodes.iter().map(|e| flag(e.oracle_success))),
        unreachable: episodes.iter().filter(|e| e.unreachable).count(),
        episodes,
    }
}
