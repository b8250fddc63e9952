use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::edge_between;
use super::{view_angles, view_index_for, NavError, NavGraph, NavNode, NodeIx, ViewFeature, AZIMUTH_BINS, NUM_VIEWS};

pub const DEFAULT_ROOMS: &[&str] = &[
    "bedroom", "bathroom", "kitchen", "hallway", "lounge", "office", "closet", "garage", "studio", "pantry",
];

pub const DEFAULT_LANDMARKS: &[&str] = &[
    "sofa", "table", "sink", "bed", "lamp", "plant", "piano", "fridge", "mirror", "desk", "chair", "shelf",
    "painting", "rug", "clock", "fireplace",
];

const FLOOR_HEIGHT: f64 = 3.0;
const MIN_NODE_SPACING: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub graph_id: String,
    pub num_nodes: usize,
    pub d_sem: usize,
    pub d_vis: usize,
    pub room_labels: Vec<String>,
    pub landmark_labels: Vec<String>,
    pub avg_degree: f64,
    pub floors: usize,
    pub rooms_per_floor: usize,
    pub landmark_prob: f64,
    pub semantic_noise: f64,
    pub visual_noise: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            graph_id: "world".into(),
            num_nodes: 40,
            d_sem: 40,
            d_vis: 128,
            room_labels: DEFAULT_ROOMS.iter().map(|s| s.to_string()).collect(),
            landmark_labels: DEFAULT_LANDMARKS.iter().map(|s| s.to_string()).collect(),
            avg_degree: 3.0,
            floors: 2,
            rooms_per_floor: 4,
            landmark_prob: 0.6,
            semantic_noise: 0.1,
            visual_noise: 0.3,
        }
    }
}

impl WorldSpec {
    /// Room labels followed by landmark labels; semantic vectors index into
    /// this list.
    pub fn categories(&self) -> Vec<String> {
        self.room_labels
            .iter()
            .chain(&self.landmark_labels)
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeAnnotation {
    pub room: String,
    pub landmark: Option<String>,
}

/// A navigation graph with the labels its features and instructions were
/// rendered from.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub graph: NavGraph,
    pub d_sem: usize,
    pub d_vis: usize,
    pub categories: Vec<String>,
    pub annotations: Vec<NodeAnnotation>,
}

impl World {
    pub fn annotation(&self, ix: NodeIx) -> &NodeAnnotation {
        &self.annotations[ix.0]
    }

    pub fn feature_width(&self) -> usize {
        self.d_sem + self.d_vis
    }
}

/// Builds a connected random geometric graph over a multi-floor layout with
/// synthetic per-view features. A pure function of `(seed, spec)`.
pub fn generate_world(seed: u64, spec: &WorldSpec) -> Result<World, NavError> {
    let categories = spec.categories();
    if spec.num_nodes < 2 {
        return Err(NavError::Generation("need at least 2 nodes".into()));
    }
    if spec.avg_degree < 1.0 {
        return Err(NavError::Generation("average degree must be at least 1".into()));
    }
    if spec.floors == 0 || spec.floors > spec.num_nodes {
        return Err(NavError::Generation(format!(
            "{} floors cannot be laid out with {} nodes",
            spec.floors, spec.num_nodes
        )));
    }
    if spec.room_labels.is_empty() || spec.rooms_per_floor == 0 {
        return Err(NavError::Generation("need at least one room label".into()));
    }
    if spec.d_sem < categories.len() {
        return Err(NavError::Generation(format!(
            "d_sem {} is smaller than the {} room/landmark categories",
            spec.d_sem,
            categories.len()
        )));
    }
    if spec.d_vis == 0 {
        return Err(NavError::Generation("d_vis must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Layout: nodes split evenly across floors, scattered with a minimum
    // spacing on a square whose side grows with the node count.
    let mut floor_of = Vec::with_capacity(spec.num_nodes);
    for f in 0..spec.floors {
        let count = spec.num_nodes / spec.floors + usize::from(f < spec.num_nodes % spec.floors);
        floor_of.extend(std::iter::repeat_n(f, count));
    }
    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(spec.num_nodes);
    for f in 0..spec.floors {
        let count = floor_of.iter().filter(|&&x| x == f).count();
        let side = 2.5 * (count as f64).sqrt().max(1.0);
        let mut placed: Vec<[f64; 3]> = Vec::new();
        for _ in 0..count {
            let mut p = [0.0; 3];
            for _attempt in 0..200 {
                p = [
                    rng.random_range(0.0..side),
                    rng.random_range(0.0..side),
                    f as f64 * FLOOR_HEIGHT,
                ];
                if placed
                    .iter()
                    .all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= MIN_NODE_SPACING)
                {
                    break;
                }
            }
            if placed
                .iter()
                .any(|q| (p[0] - q[0]).hypot(p[1] - q[1]) < 1e-6)
            {
                return Err(NavError::Generation("could not place nodes apart".into()));
            }
            placed.push(p);
        }
        positions.extend(placed);
    }

    // Rooms: nearest of a few random centers per floor.
    let mut annotations = Vec::with_capacity(spec.num_nodes);
    let mut room_centers: Vec<Vec<([f64; 2], usize)>> = Vec::new();
    for _ in 0..spec.floors {
        let mut labels: Vec<usize> = (0..spec.room_labels.len()).collect();
        labels.shuffle(&mut rng);
        let centers = (0..spec.rooms_per_floor)
            .map(|i| {
                let side = 2.5 * ((spec.num_nodes / spec.floors).max(1) as f64).sqrt();
                (
                    [rng.random_range(0.0..side), rng.random_range(0.0..side)],
                    labels[i % labels.len()],
                )
            })
            .collect();
        room_centers.push(centers);
    }
    for (i, p) in positions.iter().enumerate() {
        let centers = &room_centers[floor_of[i]];
        let room = centers
            .iter()
            .min_by(|a, b| {
                let da = (p[0] - a.0[0]).hypot(p[1] - a.0[1]);
                let db = (p[0] - b.0[0]).hypot(p[1] - b.0[1]);
                da.total_cmp(&db)
            })
            .map(|c| c.1)
            .expect("at least one room center");
        let landmark = (!spec.landmark_labels.is_empty() && rng.random_bool(spec.landmark_prob))
            .then(|| spec.landmark_labels[rng.random_range(0..spec.landmark_labels.len())].clone());
        annotations.push(NodeAnnotation {
            room: spec.room_labels[room].clone(),
            landmark,
        });
    }

    // Edges: a minimum spanning forest per floor, then the shortest remaining
    // same-floor pairs up to the degree budget, then one stair edge between
    // consecutive floors.
    let n = spec.num_nodes;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if floor_of[a] == floor_of[b] {
                let d = (positions[a][0] - positions[b][0]).hypot(positions[a][1] - positions[b][1]);
                pairs.push((d, a, b));
            }
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut uf = UnionFind::new(n);
    let mut chosen = vec![false; pairs.len()];
    let mut edge_list: Vec<(usize, usize)> = Vec::new();
    for (i, &(_, a, b)) in pairs.iter().enumerate() {
        if uf.union(a, b) {
            chosen[i] = true;
            edge_list.push((a, b));
        }
    }
    let budget = ((n as f64 * spec.avg_degree) / 2.0).round() as usize;
    for (i, &(_, a, b)) in pairs.iter().enumerate() {
        if edge_list.len() + spec.floors.saturating_sub(1) >= budget {
            break;
        }
        if !chosen[i] {
            edge_list.push((a, b));
        }
    }
    for f in 1..spec.floors {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in (0..n).filter(|&a| floor_of[a] == f - 1) {
            for b in (0..n).filter(|&b| floor_of[b] == f) {
                let d = (positions[a][0] - positions[b][0]).hypot(positions[a][1] - positions[b][1]);
                if best.is_none_or(|x| d < x.0) {
                    best = Some((d, a, b));
                }
            }
        }
        let (_, a, b) = best.ok_or_else(|| NavError::Generation("empty floor".into()))?;
        uf.union(a, b);
        edge_list.push((a, b));
    }
    if (1..n).any(|i| uf.find(i) != uf.find(0)) {
        return Err(NavError::Generation("layout could not be connected".into()));
    }

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in &edge_list {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }

    // Features: a noisy one/two-hot over the categories visible in each view
    // and a visual vector mixing per-category prototypes.
    let sem_noise = Normal::new(0.0, spec.semantic_noise.max(1e-12))
        .map_err(|e| NavError::Generation(e.to_string()))?;
    let vis_noise = Normal::new(0.0, spec.visual_noise.max(1e-12))
        .map_err(|e| NavError::Generation(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let prototypes: Vec<Vec<f64>> = (0..categories.len())
        .map(|_| (0..spec.d_vis).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let category_of = |label: &str| categories.iter().position(|c| c == label).expect("known label");

    let mut graph = NavGraph::new(spec.graph_id.clone());
    for u in 0..n {
        let mut clean = vec![vec![0.0; spec.d_sem]; NUM_VIEWS];
        let mut covered = [false; NUM_VIEWS];
        let stub_u = NavNode {
            id: String::new(),
            position: positions[u],
            views: Vec::new(),
        };
        for &v in &neighbors[u] {
            let stub_v = NavNode {
                id: String::new(),
                position: positions[v],
                views: Vec::new(),
            };
            let e = edge_between(&stub_u, &stub_v, NodeIx(u), NodeIx(v));
            let view = view_index_for(e.azimuth, e.elevation);
            covered[view] = true;
            clean[view][category_of(&annotations[v].room)] += 1.0;
            if let Some(lm) = &annotations[v].landmark {
                clean[view][category_of(lm)] += 1.0;
            }
        }
        let own_room = category_of(&annotations[u].room);
        for (view, c) in clean.iter_mut().enumerate() {
            if !covered[view] && view / AZIMUTH_BINS == 1 {
                c[own_room] += 0.5;
            }
        }
        if let Some(lm) = &annotations[u].landmark {
            clean[(u * 7) % AZIMUTH_BINS][category_of(lm)] += 0.5;
        }
        let mut views = Vec::with_capacity(NUM_VIEWS);
        for (view, c) in clean.iter().enumerate() {
            let (azimuth, elevation) = view_angles(view);
            let semantic: Vec<f64> = c.iter().map(|x| x + sem_noise.sample(&mut rng)).collect();
            let mut visual: Vec<f64> = (0..spec.d_vis).map(|_| vis_noise.sample(&mut rng)).collect();
            for (cat, weight) in c.iter().enumerate().filter(|(_, w)| **w != 0.0) {
                for (dst, p) in visual.iter_mut().zip(&prototypes[cat]) {
                    *dst += weight * p;
                }
            }
            views.push(ViewFeature {
                semantic,
                visual,
                azimuth,
                elevation,
            });
        }
        graph.add_node(NavNode {
            id: format!("n{u:03}"),
            position: positions[u],
            views,
        })?;
    }
    for &(a, b) in &edge_list {
        graph.connect(NodeIx(a), NodeIx(b))?;
    }
    graph.validate()?;
    Ok(World {
        graph,
        d_sem: spec.d_sem,
        d_vis: spec.d_vis,
        categories,
        annotations,
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra.max(rb)] = ra.min(rb);
        true
    }
}
