use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{signed_angle, Episode, NavError, NodeIx, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub count: usize,
    /// Inclusive range of path lengths in edges.
    pub min_edges: usize,
    pub max_edges: usize,
    /// Goals closer than this to the start are rejected so that stopping
    /// immediately never counts as success.
    pub min_goal_distance: f64,
    pub id_prefix: String,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            count: 100,
            min_edges: 2,
            max_edges: 6,
            min_goal_distance: 3.0,
            id_prefix: "ep".into(),
        }
    }
}

/// Phrase templates instructions are assembled from. `{room}` and
/// `{landmark}` are substituted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateGrammar {
    pub opening: Vec<String>,
    pub straight: Vec<String>,
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub around: Vec<String>,
    pub up: Vec<String>,
    pub down: Vec<String>,
    pub past_landmark: Vec<String>,
    pub enter_room: Vec<String>,
    pub stop_room: Vec<String>,
    pub stop_landmark: Vec<String>,
    pub joiner: String,
    pub landmark_prob: f64,
    pub max_tokens: usize,
}

impl Default for TemplateGrammar {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            opening: v(&["exit the {room}", "walk out of the {room}", "leave the {room}"]),
            straight: v(&["go straight", "walk forward", "continue ahead"]),
            left: v(&["turn left", "go left", "bear left"]),
            right: v(&["turn right", "go right", "bear right"]),
            around: v(&["turn around", "head back"]),
            up: v(&["go up the stairs", "walk up the stairs"]),
            down: v(&["go down the stairs", "walk down the stairs"]),
            past_landmark: v(&["walk past the {landmark}", "pass the {landmark}"]),
            enter_room: v(&["enter the {room}", "walk into the {room}"]),
            stop_room: v(&["stop in the {room}", "wait in the {room}"]),
            stop_landmark: v(&["stop by the {landmark}", "wait by the {landmark}"]),
            joiner: "then".into(),
            landmark_prob: 0.6,
            max_tokens: 40,
        }
    }
}

impl TemplateGrammar {
    fn pick(&self, options: &[String], rng: &mut ChaCha8Rng, room: &str, landmark: &str) -> String {
        options
            .choose(rng)
            .map(|t| t.replace("{room}", room).replace("{landmark}", landmark))
            .unwrap_or_default()
    }
}

struct Clause {
    text: String,
    required: bool,
}

/// Samples `spec.count` shortest-path episodes and renders an instruction
/// for each. A pure function of `(seed, world, spec, grammar)`.
pub fn generate_episodes(
    seed: u64,
    world: &World,
    spec: &EpisodeSpec,
    grammar: &TemplateGrammar,
) -> Result<Vec<Episode>, NavError> {
    if spec.count == 0 {
        return Ok(Vec::new());
    }
    if spec.min_edges == 0 || spec.min_edges > spec.max_edges {
        return Err(NavError::Generation(format!(
            "invalid edge range {}..={}",
            spec.min_edges, spec.max_edges
        )));
    }
    let graph = &world.graph;
    let mut pairs: Vec<Vec<NodeIx>> = Vec::new();
    let (mut achievable_min, mut achievable_max) = (usize::MAX, 0);
    for s in graph.node_ixs() {
        let tree = graph.shortest_paths_from(s);
        for g in graph.node_ixs() {
            let Some(d) = tree.distance(g) else { continue };
            if s == g || d <= spec.min_goal_distance {
                continue;
            }
            let path = tree.path_to(g).expect("reachable");
            let hops = path.len() - 1;
            achievable_min = achievable_min.min(hops);
            achievable_max = achievable_max.max(hops);
            if (spec.min_edges..=spec.max_edges).contains(&hops) {
                pairs.push(path);
            }
        }
    }
    if pairs.is_empty() {
        return Err(NavError::NoEpisodePair {
            requested_min: spec.min_edges,
            requested_max: spec.max_edges,
            min_distance: spec.min_goal_distance,
            achievable_min: if achievable_min == usize::MAX { 0 } else { achievable_min },
            achievable_max,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let path = &pairs[rng.random_range(0..pairs.len())];
        let instruction = render_instruction(world, path, 0.0, grammar, &mut rng);
        episodes.push(Episode {
            id: format!("{}{:05}", spec.id_prefix, i),
            graph_id: graph.id.clone(),
            instruction,
            path: graph.path_ids(path),
            start_heading: 0.0,
        });
    }
    Ok(episodes)
}

/// Renders one instruction: an opening clause, one motion clause per edge
/// with optional landmark and room mentions, and a closing clause. Optional
/// clauses are dropped from the middle until the token budget is met.
pub fn render_instruction(
    world: &World,
    path: &[NodeIx],
    start_heading: f64,
    grammar: &TemplateGrammar,
    rng: &mut ChaCha8Rng,
) -> String {
    let graph = &world.graph;
    let start = world.annotation(path[0]);
    let mut clauses = vec![Clause {
        text: grammar.pick(&grammar.opening, rng, &start.room, ""),
        required: true,
    }];
    let mut heading = start_heading;
    let mut current_room = start.room.clone();
    let goal = *path.last().expect("non-empty path");
    for w in path.windows(2) {
        let e = graph.edge(w[0], w[1]).expect("consecutive path nodes are adjacent");
        let turn = signed_angle(e.azimuth - heading).to_degrees();
        let options = if e.elevation > 0.3 {
            &grammar.up
        } else if e.elevation < -0.3 {
            &grammar.down
        } else if turn.abs() <= 45.0 {
            &grammar.straight
        } else if turn.abs() >= 135.0 {
            &grammar.around
        } else if turn > 0.0 {
            &grammar.right
        } else {
            &grammar.left
        };
        let motion = grammar.pick(options, rng, "", "");
        let merge = clauses
            .last()
            .is_some_and(|c| !c.required && c.text == motion && grammar.straight.contains(&motion));
        if !merge {
            clauses.push(Clause {
                text: motion,
                required: false,
            });
        }
        heading = e.azimuth;
        let dest = world.annotation(w[1]);
        if w[1] != goal {
            if let Some(lm) = &dest.landmark {
                if rng.random_bool(grammar.landmark_prob) {
                    clauses.push(Clause {
                        text: grammar.pick(&grammar.past_landmark, rng, "", lm),
                        required: false,
                    });
                }
            }
        }
        if dest.room != current_room && w[1] != goal {
            clauses.push(Clause {
                text: grammar.pick(&grammar.enter_room, rng, &dest.room, ""),
                required: false,
            });
        }
        current_room = dest.room.clone();
    }
    let end = world.annotation(goal);
    let closing = match &end.landmark {
        Some(lm) if rng.random_bool(0.5) => grammar.pick(&grammar.stop_landmark, rng, "", lm),
        _ => grammar.pick(&grammar.stop_room, rng, &end.room, ""),
    };
    clauses.push(Clause {
        text: closing,
        required: true,
    });

    let joiner_tokens = grammar.joiner.split_whitespace().count();
    let token_count = |cs: &[Clause]| {
        cs.iter().map(|c| c.text.split_whitespace().count()).sum::<usize>()
            + joiner_tokens * cs.len().saturating_sub(1)
    };
    while token_count(&clauses) > grammar.max_tokens {
        let optional: Vec<usize> = (0..clauses.len()).filter(|&i| !clauses[i].required).collect();
        let Some(&drop) = optional.choose(rng) else { break };
        clauses.remove(drop);
    }
    let sep = format!(" {} ", grammar.joiner);
    clauses
        .iter()
        .map(|c| c.text.as_str())
        .collect::<Vec<_>>()
        .join(&sep)
}
