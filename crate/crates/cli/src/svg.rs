use std::fmt::Write;

use crossmap_core::navworld::NavGraph;

const SCALE: f64 = 40.0;
const MARGIN: f64 = 30.0;
const FLOOR_HEIGHT: f64 = 3.0;

/// Plan view of a graph with the ground-truth path and a generated path
/// overlaid. Floors are laid out left to right.
pub struct PathRender<'a> {
    pub graph: &'a NavGraph,
    pub title: &'a str,
    pub ground_truth: &'a [String],
    pub generated: &'a [String],
}

fn floor_of(z: f64) -> usize {
    (z / FLOOR_HEIGHT).round().max(0.0) as usize
}

impl PathRender<'_> {
    pub fn to_svg(&self) -> String {
        let nodes = self.graph.nodes();
        let floors = nodes.iter().map(|n| floor_of(n.position[2])).max().unwrap_or(0) + 1;
        let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for n in nodes {
            min_x = min_x.min(n.position[0]);
            max_x = max_x.max(n.position[0]);
            min_y = min_y.min(n.position[1]);
            max_y = max_y.max(n.position[1]);
        }
        if nodes.is_empty() {
            (min_x, max_x, min_y, max_y) = (0.0, 0.0, 0.0, 0.0);
        }
        let panel = (max_x - min_x) * SCALE + 2.0 * MARGIN;
        let width = panel * floors as f64;
        let height = (max_y - min_y) * SCALE + 2.0 * MARGIN + 20.0;
        let project = |p: [f64; 3]| {
            let f = floor_of(p[2]) as f64;
            (
                f * panel + MARGIN + (p[0] - min_x) * SCALE,
                20.0 + MARGIN + (max_y - p[1]) * SCALE,
            )
        };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="8" y="16" font-family="monospace" font-size="12">{}</text>"#, escape(self.title));
        for e in self.graph.all_edges() {
            if e.from.0 < e.to.0 {
                let (x1, y1) = project(self.graph.node(e.from).position);
                let (x2, y2) = project(self.graph.node(e.to).position);
                let _ = writeln!(
                    s,
                    r##"<line class="edge" x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="#bbb" stroke-width="1"/>"##
                );
            }
        }
        for (class, ids, colour, w) in [
            ("ground-truth", self.ground_truth, "#2a9d4b", 5.0),
            ("generated", self.generated, "#d62828", 2.0),
        ] {
            let pts: Vec<String> = ids
                .iter()
                .filter_map(|id| self.graph.ix(id).ok())
                .map(|ix| {
                    let (x, y) = project(self.graph.node(ix).position);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            if !pts.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline class="{class}" points="{}" fill="none" stroke="{colour}" stroke-width="{w}" stroke-opacity="0.8"/>"#,
                    pts.join(" ")
                );
            }
        }
        for n in nodes {
            let (x, y) = project(n.position);
            let _ = writeln!(
                s,
                r##"<circle class="node" cx="{x:.1}" cy="{y:.1}" r="4" fill="#264653"><title>{}</title></circle>"##,
                escape(&n.id)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
