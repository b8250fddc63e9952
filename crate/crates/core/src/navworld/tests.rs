use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, PI};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn blank_views(d: usize) -> Vec<ViewFeature> {
    (0..NUM_VIEWS)
        .map(|i| {
            let (azimuth, elevation) = view_angles(i);
            ViewFeature {
                semantic: vec![i as f64; d],
                visual: vec![0.5; d],
                azimuth,
                elevation,
            }
        })
        .collect()
}

fn graph_from(positions: &[[f64; 3]], edges: &[(usize, usize)]) -> NavGraph {
    let mut g = NavGraph::new("test");
    for (i, p) in positions.iter().enumerate() {
        g.add_node(NavNode {
            id: format!("v{i}"),
            position: *p,
            views: blank_views(2),
        })
        .unwrap();
    }
    for &(a, b) in edges {
        g.connect(NodeIx(a), NodeIx(b)).unwrap();
    }
    g
}

fn small_spec(n: usize) -> WorldSpec {
    WorldSpec {
        num_nodes: n,
        d_sem: 30,
        d_vis: 8,
        ..WorldSpec::default()
    }
}

fn bfs_reachable(g: &NavGraph) -> usize {
    let mut seen = vec![false; g.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for e in g.edges(NodeIx(u)) {
            if !seen[e.to.0] {
                seen[e.to.0] = true;
                count += 1;
                queue.push_back(e.to.0);
            }
        }
    }
    count
}

fn bellman_ford(g: &NavGraph, source: usize) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; g.len()];
    dist[source] = 0.0;
    for _ in 0..g.len() {
        for e in g.all_edges() {
            if dist[e.from.0] + e.distance < dist[e.to.0] {
                dist[e.to.0] = dist[e.from.0] + e.distance;
            }
        }
    }
    dist
}

#[test]
fn view_tiling_is_tier_major() {
    assert_eq!(view_angles(0), (0.0, -VIEW_STEP));
    assert_eq!(view_angles(12), (0.0, 0.0));
    let (az, el) = view_angles(35);
    assert!((az - 11.0 * VIEW_STEP).abs() < 1e-12);
    assert!((el - VIEW_STEP).abs() < 1e-12);
    for i in 0..NUM_VIEWS {
        let (az, el) = view_angles(i);
        assert_eq!(view_index_for(az, el), i);
    }
}

#[test]
fn signed_angle_range() {
    assert!((signed_angle(3.0 * FRAC_PI_2) + FRAC_PI_2).abs() < 1e-12);
    assert!((signed_angle(PI) - PI).abs() < 1e-12);
    assert_eq!(wrap_angle(-0.0), 0.0);
}

#[test]
fn same_seed_gives_identical_world_files() {
    let a = generate_world(7, &small_spec(40)).unwrap();
    let b = generate_world(7, &small_spec(40)).unwrap();
    assert_eq!(world_to_json(&a).unwrap(), world_to_json(&b).unwrap());
    let c = generate_world(8, &small_spec(40)).unwrap();
    assert_ne!(world_to_json(&a).unwrap(), world_to_json(&c).unwrap());
}

#[test]
fn two_node_world_has_single_edge_pair() {
    let w = generate_world(3, &small_spec(2)).unwrap();
    assert_eq!(w.graph.all_edges().count(), 2);
    assert!(w.graph.edge(NodeIx(0), NodeIx(1)).is_some());
    assert!(w.graph.edge(NodeIx(1), NodeIx(0)).is_some());
}

#[test]
fn forty_node_world_is_connected_by_bfs() {
    let w = generate_world(7, &small_spec(40)).unwrap();
    assert_eq!(bfs_reachable(&w.graph), 40);
}

#[test]
fn degenerate_specs_are_rejected() {
    assert!(matches!(
        generate_world(1, &small_spec(1)),
        Err(NavError::Generation(_))
    ));
    let spec = WorldSpec {
        avg_degree: 0.5,
        ..small_spec(10)
    };
    assert!(matches!(generate_world(1, &spec), Err(NavError::Generation(_))));
    let spec = WorldSpec {
        d_sem: 3,
        ..small_spec(10)
    };
    assert!(matches!(generate_world(1, &spec), Err(NavError::Generation(_))));
}

#[test]
fn world_views_have_declared_widths() {
    let w = generate_world(11, &small_spec(12)).unwrap();
    for n in w.graph.nodes() {
        assert_eq!(n.views.len(), NUM_VIEWS);
        for v in &n.views {
            assert_eq!(v.semantic.len(), 30);
            assert_eq!(v.visual.len(), 8);
            assert!(v.semantic.iter().chain(&v.visual).all(|x| x.is_finite()));
        }
    }
}

#[test]
fn line_graph_distances_add() {
    let g = graph_from(&[[0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 5.0, 0.0]], &[(0, 1), (1, 2)]);
    assert_eq!(g.shortest_path_length("v0", "v0").unwrap(), Some(0.0));
    assert_eq!(g.shortest_path_length("v0", "v2").unwrap(), Some(5.0));
    assert_eq!(g.shortest_path_length("v2", "v0").unwrap(), Some(5.0));
    assert!(matches!(g.shortest_path_length("v0", "zz"), Err(NavError::UnknownNode(_))));
}

#[test]
fn unreachable_is_explicit() {
    let g = graph_from(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]], &[(0, 1)]);
    assert_eq!(g.shortest_path_length("v0", "v2").unwrap(), None);
    assert!(g.validate().is_err());
}

#[test]
fn validation_catches_bad_edges() {
    let mut g = graph_from(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &[]);
    g.insert_edge(NavEdge {
        from: NodeIx(0),
        to: NodeIx(1),
        azimuth: 0.0,
        elevation: 0.0,
        distance: 1.0,
    });
    let err = g.validate().unwrap_err().to_string();
    assert!(err.contains("no reverse"), "{err}");
    g.insert_edge(NavEdge {
        from: NodeIx(1),
        to: NodeIx(0),
        azimuth: 0.0,
        elevation: 0.0,
        distance: 2.0,
    });
    let err = g.validate().unwrap_err().to_string();
    assert!(err.contains("apart"), "{err}");
    assert!(g.connect(NodeIx(0), NodeIx(0)).is_err());
}

#[test]
fn random_graph_matches_bellman_ford() {
    let w = generate_world(20, &small_spec(20)).unwrap();
    let g = &w.graph;
    for s in 0..g.len() {
        let oracle = bellman_ford(g, s);
        let tree = g.shortest_paths_from(NodeIx(s));
        for t in 0..g.len() {
            let got = tree.distance(NodeIx(t)).unwrap();
            assert!((got - oracle[t]).abs() < 1e-9, "{s}->{t}: {got} vs {}", oracle[t]);
            let path = tree.path_to(NodeIx(t)).unwrap();
            assert!((g.path_length(&path).unwrap() - got).abs() < 1e-9);
        }
    }
}

#[test]
fn stop_is_last_with_zero_geometry() {
    let g = graph_from(
        &[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        &[(0, 1), (0, 2), (0, 3)],
    );
    let cands = candidate_actions(&g, &Pose::new(NodeIx(0), 0.0));
    assert_eq!(cands.len(), 4);
    assert_eq!(cands.iter().filter(|c| c.is_stop()).count(), 1);
    assert!(cands[3].is_stop());
    assert_eq!(cands[3].positional, [1.0, 0.0, 1.0, 0.0, 0.0]);
    assert!(cands[3].feature.is_none());

    // v1 is due north and the pose faces north.
    let north = &cands[0];
    assert!((north.positional[0] - 1.0).abs() < 1e-12);
    assert!(north.positional[1].abs() < 1e-12);
    assert!((north.positional[4] - 1.0).abs() < 1e-12);
    // v2 is due east: a right turn of 90°.
    assert!((cands[1].positional[1] - 1.0).abs() < 1e-12);
    // The feature is the view facing the edge.
    assert_eq!(north.feature.as_ref().unwrap()[0], 12.0);
    assert_eq!(cands[1].feature.as_ref().unwrap()[0], 15.0);
}

#[test]
fn step_moves_and_stops() {
    let g = graph_from(&[[0.0, 0.0, 0.0], [1.0, 1.0, 0.0]], &[(0, 1)]);
    let pose = Pose::new(NodeIx(0), 0.0);
    let cands = candidate_actions(&g, &pose);
    assert_eq!(step(&g, &pose, &cands[1]).unwrap(), StepOutcome::Terminal);
    match step(&g, &pose, &cands[0]).unwrap() {
        StepOutcome::Moved(p) => {
            assert_eq!(p.node, NodeIx(1));
            let e = g.edge(NodeIx(0), NodeIx(1)).unwrap();
            assert!((p.heading - wrap_angle(e.azimuth)).abs() < 1e-12);
            assert!((p.heading - PI / 4.0).abs() < 1e-12);
        }
        StepOutcome::Terminal => panic!("expected a move"),
    }
    let foreign = ActionCandidate {
        kind: CandidateKind::Move {
            edge: 0,
            to: NodeIx(0),
        },
        feature: None,
        positional: STOP_POSITIONAL,
    };
    assert!(matches!(
        step(&g, &pose, &foreign),
        Err(NavError::NotACandidate { .. })
    ));
}

#[test]
fn zero_episodes_is_empty() {
    let w = generate_world(5, &small_spec(20)).unwrap();
    let spec = EpisodeSpec {
        count: 0,
        ..EpisodeSpec::default()
    };
    assert!(generate_episodes(1, &w, &spec, &TemplateGrammar::default()).unwrap().is_empty());
}

#[test]
fn episodes_are_valid_shortest_paths() {
    let w = generate_world(5, &small_spec(30)).unwrap();
    let spec = EpisodeSpec {
        count: 60,
        ..EpisodeSpec::default()
    };
    let eps = generate_episodes(9, &w, &spec, &TemplateGrammar::default()).unwrap();
    assert_eq!(eps.len(), 60);
    for ep in &eps {
        let path = check_episode(&w.graph, ep).unwrap();
        let hops = path.len() - 1;
        assert!((spec.min_edges..=spec.max_edges).contains(&hops));
        let walked = w.graph.path_length(&path).unwrap();
        let oracle = bellman_ford(&w.graph, path[0].0)[path.last().unwrap().0];
        assert!((walked - oracle).abs() < 1e-9);
        assert!(oracle > spec.min_goal_distance);
        let tokens = ep.instruction.split_whitespace().count();
        assert!((8..=40).contains(&tokens), "{tokens}: {}", ep.instruction);
    }
    let again = generate_episodes(9, &w, &spec, &TemplateGrammar::default()).unwrap();
    assert_eq!(eps, again);
}

#[test]
fn landmark_mentions_follow_path_order() {
    let w = generate_world(5, &small_spec(30)).unwrap();
    let spec = EpisodeSpec {
        count: 40,
        ..EpisodeSpec::default()
    };
    for ep in generate_episodes(2, &w, &spec, &TemplateGrammar::default()).unwrap() {
        let path = w.graph.resolve_path(&ep.path).unwrap();
        let along: Vec<&str> = path
            .iter()
            .filter_map(|&ix| w.annotation(ix).landmark.as_deref())
            .collect();
        let tokens: Vec<&str> = ep.instruction.split_whitespace().collect();
        let mentioned: Vec<&str> = tokens
            .iter()
            .copied()
            .filter(|t| DEFAULT_LANDMARKS.contains(t))
            .collect();
        // Mentioned landmarks form a subsequence of those along the path.
        let mut it = along.iter();
        for m in &mentioned {
            assert!(it.any(|a| a == m), "{} not in order along {:?}", ep.instruction, along);
        }
    }
}

#[test]
fn impossible_length_reports_achievable_range() {
    let w = generate_world(5, &small_spec(12)).unwrap();
    let spec = EpisodeSpec {
        count: 3,
        min_edges: 50,
        max_edges: 60,
        ..EpisodeSpec::default()
    };
    match generate_episodes(1, &w, &spec, &TemplateGrammar::default()) {
        Err(NavError::NoEpisodePair {
            achievable_min,
            achievable_max,
            ..
        }) => assert!(achievable_min >= 1 && achievable_max < 50),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn world_round_trip_is_identity() {
    let w = generate_world(13, &small_spec(15)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.json");
    save_world(&w, &path).unwrap();
    let back = load_world(&path).unwrap();
    assert_eq!(back, w);
}

#[test]
fn episode_jsonl_round_trip() {
    let w = generate_world(13, &small_spec(15)).unwrap();
    let eps = generate_episodes(
        4,
        &w,
        &EpisodeSpec {
            count: 5,
            ..EpisodeSpec::default()
        },
        &TemplateGrammar::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.jsonl");
    save_episodes(&eps, &path).unwrap();
    assert_eq!(load_episodes(&path).unwrap(), eps);
}

#[test]
fn r2r_records_expand_per_instruction() {
    assert!(parse_r2r("[]").unwrap().is_empty());
    let text = r#"[{"path_id": 17, "scan": "abc", "heading": 1.5, "distance": 9.1,
        "instructions": ["go left", "turn left and stop", "walk"], "path": ["a", "b", "c"]}]"#;
    let eps = parse_r2r(text).unwrap();
    assert_eq!(eps.len(), 3);
    assert!(eps.iter().all(|e| e.path == ["a", "b", "c"] && e.graph_id == "abc"));
    assert_eq!(eps[2].id, "17_2");
    assert_eq!(eps[0].start_heading, 1.5);
}

#[test]
fn r2r_errors_name_field_and_index() {
    let text = r#"[{"path_id": 1, "scan": "s", "heading": 0, "instructions": ["x"], "path": ["a","b"]},
                   {"path_id": 2, "scan": "s", "heading": 0, "instructions": ["x"]}]"#;
    let err = parse_r2r(text).unwrap_err();
    assert!(matches!(&err, NavError::Record { index: 1, field, .. } if field == "path"), "{err}");
    let err = parse_r2r(r#"[{"path_id": 1, "scan": 3, "heading": 0, "instructions": [], "path": []}]"#).unwrap_err();
    assert!(err.to_string().contains("`scan`"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_worlds_satisfy_invariants(seed in 0u64..10_000, n in 2usize..30) {
        let w = generate_world(seed, &small_spec(n)).unwrap();
        prop_assert!(w.graph.validate().is_ok());
        prop_assert_eq!(bfs_reachable(&w.graph), n);
        for e in w.graph.all_edges() {
            prop_assert!(w.graph.edge(e.to, e.from).is_some());
        }
    }

    #[test]
    fn stop_is_unique_and_last(seed in 0u64..10_000, node in 0usize..15, heading in 0.0..6.28f64) {
        let w = generate_world(seed, &small_spec(15)).unwrap();
        let cands = candidate_actions(&w.graph, &Pose::new(NodeIx(node), heading));
        prop_assert_eq!(cands.len(), w.graph.edges(NodeIx(node)).len() + 1);
        prop_assert_eq!(cands.iter().filter(|c| c.is_stop()).count(), 1);
        prop_assert!(cands.last().unwrap().is_stop());
    }

    #[test]
    fn triangle_inequality(seed in 0u64..10_000) {
        let w = generate_world(seed, &small_spec(16)).unwrap();
        let table = w.graph.distance_table();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let (a, b, c) = (
                NodeIx(rng.random_range(0..16)),
                NodeIx(rng.random_range(0..16)),
                NodeIx(rng.random_range(0..16)),
            );
            let ab = table.get(a, b).unwrap();
            let bc = table.get(b, c).unwrap();
            let ac = table.get(a, c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert!((ab - table.get(b, a).unwrap()).abs() < 1e-9);
        }
    }
}
