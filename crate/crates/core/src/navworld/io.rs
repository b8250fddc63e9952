use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    view_angles, Episode, NavEdge, NavError, NavGraph, NavNode, NodeAnnotation, NodeIx, ViewFeature, World, NUM_VIEWS,
};

pub const WORLD_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WorldFile {
    version: u32,
    graph_id: String,
    d_sem: usize,
    d_vis: usize,
    categories: Vec<String>,
    nodes: Vec<NodeRecord>,
    edges: Vec<EdgeRecord>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: String,
    position: [f64; 3],
    room: String,
    landmark: Option<String>,
    /// 36 × d_sem little-endian f64, base64.
    semantic: String,
    /// 36 × d_vis little-endian f64, base64.
    visual: String,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    from: String,
    to: String,
    azimuth: f64,
    elevation: f64,
    distance: f64,
}

fn encode_f64s<'a>(chunks: impl Iterator<Item = &'a [f64]>) -> String {
    let mut bytes = Vec::new();
    for chunk in chunks {
        for x in chunk {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    STANDARD.encode(bytes)
}

fn decode_f64s(node: &str, field: &str, payload: &str, expected: usize) -> Result<Vec<f64>, NavError> {
    let bytes = STANDARD
        .decode(payload)
        .map_err(|e| NavError::Format(format!("node {node} {field}: {e}")))?;
    if bytes.len() != expected * 8 {
        return Err(NavError::Format(format!(
            "node {node} {field}: {} bytes, expected {}",
            bytes.len(),
            expected * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NavError::Format(format!("node {node} {field}: non-finite value")));
    }
    Ok(values)
}

pub fn world_to_json(world: &World) -> Result<String, NavError> {
    let g = &world.graph;
    let nodes = g
        .nodes()
        .iter()
        .zip(&world.annotations)
        .map(|(n, a)| NodeRecord {
            id: n.id.clone(),
            position: n.position,
            room: a.room.clone(),
            landmark: a.landmark.clone(),
            semantic: encode_f64s(n.views.iter().map(|v| v.semantic.as_slice())),
            visual: encode_f64s(n.views.iter().map(|v| v.visual.as_slice())),
        })
        .collect();
    let edges = g
        .all_edges()
        .map(|e| EdgeRecord {
            from: g.node(e.from).id.clone(),
            to: g.node(e.to).id.clone(),
            azimuth: e.azimuth,
            elevation: e.elevation,
            distance: e.distance,
        })
        .collect();
    let file = WorldFile {
        version: WORLD_FORMAT_VERSION,
        graph_id: g.id.clone(),
        d_sem: world.d_sem,
        d_vis: world.d_vis,
        categories: world.categories.clone(),
        nodes,
        edges,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn world_from_json(text: &str) -> Result<World, NavError> {
    let file: WorldFile = serde_json::from_str(text)?;
    if file.version != WORLD_FORMAT_VERSION {
        return Err(NavError::Format(format!(
            "unsupported version {} (expected {WORLD_FORMAT_VERSION})",
            file.version
        )));
    }
    let mut graph = NavGraph::new(file.graph_id);
    let mut annotations = Vec::with_capacity(file.nodes.len());
    for rec in file.nodes {
        let sem = decode_f64s(&rec.id, "semantic", &rec.semantic, NUM_VIEWS * file.d_sem)?;
        let vis = decode_f64s(&rec.id, "visual", &rec.visual, NUM_VIEWS * file.d_vis)?;
        let views = (0..NUM_VIEWS)
            .map(|i| {
                let (azimuth, elevation) = view_angles(i);
                ViewFeature {
                    semantic: sem[i * file.d_sem..(i + 1) * file.d_sem].to_vec(),
                    visual: vis[i * file.d_vis..(i + 1) * file.d_vis].to_vec(),
                    azimuth,
                    elevation,
                }
            })
            .collect();
        graph.add_node(NavNode {
            id: rec.id,
            position: rec.position,
            views,
        })?;
        annotations.push(NodeAnnotation {
            room: rec.room,
            landmark: rec.landmark,
        });
    }
    for e in file.edges {
        let (from, to) = (graph.ix(&e.from)?, graph.ix(&e.to)?);
        graph.insert_edge(NavEdge {
            from,
            to,
            azimuth: e.azimuth,
            elevation: e.elevation,
            distance: e.distance,
        });
    }
    graph.validate()?;
    Ok(World {
        graph,
        d_sem: file.d_sem,
        d_vis: file.d_vis,
        categories: file.categories,
        annotations,
    })
}

pub fn save_world(world: &World, path: impl AsRef<Path>) -> Result<(), NavError> {
    fs::write(path, world_to_json(world)?)?;
    Ok(())
}

pub fn load_world(path: impl AsRef<Path>) -> Result<World, NavError> {
    world_from_json(&fs::read_to_string(path)?)
}

pub fn save_episodes(episodes: &[Episode], path: impl AsRef<Path>) -> Result<(), NavError> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for ep in episodes {
        serde_json::to_writer(&mut out, ep)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_episodes(path: impl AsRef<Path>) -> Result<Vec<Episode>, NavError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut episodes = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: Episode = serde_json::from_str(&line).map_err(|e| NavError::Record {
            index,
            field: "line".into(),
            reason: e.to_string(),
        })?;
        if ep.path.len() < 2 {
            return Err(NavError::InvalidEpisode {
                id: ep.id,
                reason: "path needs at least 2 nodes".into(),
            });
        }
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Checks an episode against a graph: known nodes, adjacent consecutive
/// nodes and no immediate back-and-forth.
pub fn check_episode(graph: &NavGraph, ep: &Episode) -> Result<Vec<NodeIx>, NavError> {
    let invalid = |reason: String| NavError::InvalidEpisode {
        id: ep.id.clone(),
        reason,
    };
    if ep.path.len() < 2 {
        return Err(invalid("path needs at least 2 nodes".into()));
    }
    let path = graph.resolve_path(&ep.path).map_err(|e| invalid(e.to_string()))?;
    for w in path.windows(2) {
        if graph.edge(w[0], w[1]).is_none() {
            return Err(invalid(format!(
                "{} and {} are not adjacent",
                graph.node(w[0]).id,
                graph.node(w[1]).id
            )));
        }
    }
    if path.windows(3).any(|w| w[0] == w[2]) {
        return Err(invalid("path doubles back on itself".into()));
    }
    Ok(path)
}

fn field<'a>(rec: &'a Value, index: usize, name: &str) -> Result<&'a Value, NavError> {
    rec.get(name).ok_or_else(|| NavError::Record {
        index,
        field: name.into(),
        reason: "missing".into(),
    })
}

/// Parses the R2R annotation schema: one episode per instruction string,
/// with ids `{path_id}_{k}`.
pub fn parse_r2r(text: &str) -> Result<Vec<Episode>, NavError> {
    let root: Value = serde_json::from_str(text)?;
    let records = root.as_array().ok_or_else(|| NavError::Record {
        index: 0,
        field: "<root>".into(),
        reason: "expected a JSON array".into(),
    })?;
    let bad = |index: usize, name: &str, reason: &str| NavError::Record {
        index,
        field: name.into(),
        reason: reason.into(),
    };
    let mut episodes = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        let path_id = match field(rec, index, "path_id")? {
            Value::Number(n) => n.to_string(),
            Value::String(s) => s.clone(),
            _ => return Err(bad(index, "path_id", "expected a number or string")),
        };
        let scan = field(rec, index, "scan")?
            .as_str()
            .ok_or_else(|| bad(index, "scan", "expected a string"))?;
        let heading = field(rec, index, "heading")?
            .as_f64()
            .ok_or_else(|| bad(index, "heading", "expected a number"))?;
        let path: Vec<String> = field(rec, index, "path")?
            .as_array()
            .ok_or_else(|| bad(index, "path", "expected an array"))?
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect::<Option<_>>()
            .ok_or_else(|| bad(index, "path", "expected node id strings"))?;
        if path.len() < 2 {
            return Err(bad(index, "path", "needs at least 2 nodes"));
        }
        let instructions = field(rec, index, "instructions")?
            .as_array()
            .ok_or_else(|| bad(index, "instructions", "expected an array"))?;
        for (k, instr) in instructions.iter().enumerate() {
            let instruction = instr
                .as_str()
                .ok_or_else(|| bad(index, "instructions", "expected strings"))?;
            episodes.push(Episode {
                id: format!("{path_id}_{k}"),
                graph_id: scan.to_string(),
                instruction: instruction.to_string(),
                path: path.clone(),
                start_heading: heading,
            });
        }
    }
    Ok(episodes)
}

pub fn load_r2r_json(path: impl AsRef<Path>) -> Result<Vec<Episode>, NavError> {
    parse_r2r(&fs::read_to_string(path)?)
}
