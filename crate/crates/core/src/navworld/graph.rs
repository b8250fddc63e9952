use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use super::{wrap_angle, NavEdge, NavError, NavNode, NodeIx, NUM_VIEWS};

/// Navigation graph with directed edges stored per source node.
#[derive(Clone, Debug, PartialEq)]
pub struct NavGraph {
    pub id: String,
    nodes: Vec<NavNode>,
    adjacency: Vec<Vec<NavEdge>>,
    index: HashMap<String, NodeIx>,
}

impl NavGraph {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            nodes: Vec::new(),
            adjacency: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add_node(&mut self, node: NavNode) -> Result<NodeIx, NavError> {
        if self.index.contains_key(&node.id) {
            return Err(NavError::Invariant(format!("duplicate node id {}", node.id)));
        }
        let ix = NodeIx(self.nodes.len());
        self.index.insert(node.id.clone(), ix);
        self.nodes.push(node);
        self.adjacency.push(Vec::new());
        Ok(ix)
    }

    /// Adds the edge `a → b` and its reverse, with geometry derived from the
    /// node positions.
    pub fn connect(&mut self, a: NodeIx, b: NodeIx) -> Result<(), NavError> {
        if a == b {
            return Err(NavError::Invariant("self-loop".into()));
        }
        if self.adjacency[a.0].iter().any(|e| e.to == b) {
            return Ok(());
        }
        let fwd = edge_between(&self.nodes[a.0], &self.nodes[b.0], a, b);
        let back = edge_between(&self.nodes[b.0], &self.nodes[a.0], b, a);
        self.adjacency[a.0].push(fwd);
        self.adjacency[b.0].push(back);
        Ok(())
    }

    /// Inserts a directed edge as given. Used by loaders; call
    /// [`NavGraph::validate`] afterwards.
    pub fn insert_edge(&mut self, edge: NavEdge) {
        self.adjacency[edge.from.0].push(edge);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, ix: NodeIx) -> &NavNode {
        &self.nodes[ix.0]
    }

    pub fn nodes(&self) -> &[NavNode] {
        &self.nodes
    }

    pub fn node_ixs(&self) -> impl Iterator<Item = NodeIx> {
        (0..self.nodes.len()).map(NodeIx)
    }

    pub fn edges(&self, ix: NodeIx) -> &[NavEdge] {
        &self.adjacency[ix.0]
    }

    pub fn all_edges(&self) -> impl Iterator<Item = &NavEdge> {
        self.adjacency.iter().flatten()
    }

    pub fn edge(&self, from: NodeIx, to: NodeIx) -> Option<&NavEdge> {
        self.adjacency[from.0].iter().find(|e| e.to == to)
    }

    pub fn ix(&self, id: &str) -> Result<NodeIx, NavError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| NavError::UnknownNode(id.to_string()))
    }

    pub fn resolve_path(&self, ids: &[String]) -> Result<Vec<NodeIx>, NavError> {
        ids.iter().map(|id| self.ix(id)).collect()
    }

    pub fn path_ids(&self, path: &[NodeIx]) -> Vec<String> {
        path.iter().map(|ix| self.nodes[ix.0].id.clone()).collect()
    }

    /// Sum of edge lengths along consecutive nodes, `None` if two are not
    /// adjacent.
    pub fn path_length(&self, path: &[NodeIx]) -> Option<f64> {
        path.windows(2)
            .map(|w| self.edge(w[0], w[1]).map(|e| e.distance))
            .sum()
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for e in &self.adjacency[u] {
                if !seen[e.to.0] {
                    seen[e.to.0] = true;
                    queue.push_back(e.to.0);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<(), NavError> {
        for (u, node) in self.nodes.iter().enumerate() {
            if node.views.len() != NUM_VIEWS {
                return Err(NavError::Invariant(format!(
                    "node {} has {} views",
                    node.id,
                    node.views.len()
                )));
            }
            for e in &self.adjacency[u] {
                if e.from.0 != u {
                    return Err(NavError::Invariant(format!("edge stored under wrong node {}", node.id)));
                }
                if e.to.0 == u {
                    return Err(NavError::Invariant(format!("self-loop at {}", node.id)));
                }
                if !(e.distance > 0.0) {
                    return Err(NavError::Invariant(format!("non-positive edge length at {}", node.id)));
                }
                let expected = euclidean(&node.position, &self.nodes[e.to.0].position);
                if (expected - e.distance).abs() > 1e-6 {
                    return Err(NavError::Invariant(format!(
                        "edge {} -> {} length {} but endpoints are {} apart",
                        node.id, self.nodes[e.to.0].id, e.distance, expected
                    )));
                }
                if self.edge(e.to, e.from).is_none() {
                    return Err(NavError::Invariant(format!(
                        "edge {} -> {} has no reverse",
                        node.id, self.nodes[e.to.0].id
                    )));
                }
            }
        }
        if !self.is_connected() {
            return Err(NavError::Invariant("graph is not connected".into()));
        }
        Ok(())
    }

    /// Dijkstra from `source`. Ties are broken toward the lower node index so
    /// results are deterministic.
    pub fn shortest_paths_from(&self, source: NodeIx) -> ShortestPaths {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[source.0] = 0.0;
        heap.push(QueueItem { dist: 0.0, node: source.0 });
        while let Some(QueueItem { dist: d, node: u }) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            for e in &self.adjacency[u] {
                let v = e.to.0;
                let nd = d + e.distance;
                if nd < dist[v] || (nd == dist[v] && prev[v].is_some_and(|p: NodeIx| u < p.0)) {
                    dist[v] = nd;
                    prev[v] = Some(NodeIx(u));
                    heap.push(QueueItem { dist: nd, node: v });
                }
            }
        }
        ShortestPaths {
            source,
            dist,
            prev,
        }
    }

    /// Geodesic distance in meters, `None` when `b` is unreachable from `a`.
    pub fn shortest_path_length(&self, a: &str, b: &str) -> Result<Option<f64>, NavError> {
        let (a, b) = (self.ix(a)?, self.ix(b)?);
        Ok(self.shortest_paths_from(a).distance(b))
    }

    /// Node sequence of a shortest path, `None` when unreachable.
    pub fn shortest_path(&self, a: NodeIx, b: NodeIx) -> Option<Vec<NodeIx>> {
        self.shortest_paths_from(a).path_to(b)
    }

    pub fn distance_table(&self) -> DistanceTable {
        DistanceTable {
            rows: self
                .node_ixs()
                .map(|s| self.shortest_paths_from(s).dist)
                .collect(),
        }
    }
}

fn euclidean(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub(crate) fn edge_between(a: &NavNode, b: &NavNode, from: NodeIx, to: NodeIx) -> NavEdge {
    let dx = b.position[0] - a.position[0];
    let dy = b.position[1] - a.position[1];
    let dz = b.position[2] - a.position[2];
    let horizontal = dx.hypot(dy);
    NavEdge {
        from,
        to,
        azimuth: wrap_angle(dx.atan2(dy)),
        elevation: dz.atan2(horizontal),
        distance: euclidean(&a.position, &b.position),
    }
}

#[derive(Clone, Copy, Debug)]
struct QueueItem {
    dist: f64,
    node: usize,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for QueueItem {}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for QueueItem {
    // Reversed so the max-heap pops the nearest node first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Single-source shortest-path tree.
#[derive(Clone, Debug)]
pub struct ShortestPaths {
    pub source: NodeIx,
    dist: Vec<f64>,
    prev: Vec<Option<NodeIx>>,
}

impl ShortestPaths {
    pub fn distance(&self, to: NodeIx) -> Option<f64> {
        let d = self.dist[to.0];
        d.is_finite().then_some(d)
    }

    pub fn path_to(&self, to: NodeIx) -> Option<Vec<NodeIx>> {
        self.distance(to)?;
        let mut path = vec![to];
        let mut cur = to;
        while let Some(p) = self.prev[cur.0] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        Some(path)
    }

    /// Node preceding `to` on the tree path from the source. On an undirected
    /// graph this is the next hop from `to` toward the source.
    pub fn predecessor(&self, to: NodeIx) -> Option<NodeIx> {
        self.prev[to.0]
    }

    /// Number of edges on the shortest path.
    pub fn hops(&self, to: NodeIx) -> Option<usize> {
        self.path_to(to).map(|p| p.len() - 1)
    }
}

/// All-pairs geodesic distances; `f64::INFINITY` marks unreachable pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    rows: Vec<Vec<f64>>,
}

impl DistanceTable {
    pub fn get(&self, a: NodeIx, b: NodeIx) -> Option<f64> {
        let d = self.rows[a.0][b.0];
        d.is_finite().then_some(d)
    }
}
