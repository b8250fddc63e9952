use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Pass;
use super::rollout::path_loss;
use super::{Cmt, FeatureDims, ModelConfig, ModelError};
use crate::navworld::{generate_world, Episode, World, WorldSpec};
use crate::numerics::gradcheck::{relative_error, GradCheckResult};
use crate::numerics::{ParamStore, Tape};
use crate::textcodec::Vocabulary;

/// A two-node world with narrow features.
pub fn tiny_world(seed: u64) -> Result<World, ModelError> {
    let spec = WorldSpec {
        graph_id: "tiny".into(),
        num_nodes: 2,
        d_sem: 3,
        d_vis: 2,
        room_labels: vec!["hall".into(), "den".into()],
        landmark_labels: vec!["lamp".into()],
        rooms_per_floor: 1,
        ..WorldSpec::default()
    };
    Ok(generate_world(seed, &spec)?)
}

fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let first = parts.next().unwrap_or_default();
    let second = parts.next().unwrap_or_default();
    format!("{first}.{second}")
}

/// Central finite differences of the teacher-forced path loss on a two-node
/// world against autodiff, one result per parameter group.
pub fn end_to_end_gradcheck(seed: u64, eps: f64, tolerance: f64) -> Result<Vec<GradCheckResult>, ModelError> {
    let world = tiny_world(seed)?;
    let config = ModelConfig {
        hidden: 4,
        heads: 2,
        ff_size: 6,
        max_path: 3,
        ..ModelConfig::default()
    };
    let episode = Episode {
        id: "check".into(),
        graph_id: world.graph.id.clone(),
        instruction: "walk to the den".into(),
        path: world.graph.path_ids(&[crate::navworld::NodeIx(0), crate::navworld::NodeIx(1)]),
        start_heading: 0.3,
    };
    let vocab = Vocabulary::build(&[episode.instruction.as_str()], 1);
    let instr = vocab.encode(&episode.instruction);
    let dims = FeatureDims {
        d_sem: world.d_sem,
        d_vis: world.d_vis,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    // A larger init spread keeps the loss surface away from flat regions.
    let cmt = Cmt::new(
        &mut store,
        &ModelConfig {
            init_std: 0.5,
            ..config.clone()
        },
        dims,
        vocab.len(),
        &mut rng,
    )?;

    type Eval = (f64, Vec<bool>, Option<crate::numerics::Gradients>);
    let loss_of = |store: &ParamStore, grads: bool| -> Result<Eval, ModelError> {
        let mut tape = Tape::with_params(store, grads);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
        let mut pass = Pass {
            tape: &mut tape,
            rng: &mut drop_rng,
            training: false,
            config: &config,
        };
        let loss = path_loss(&cmt, &mut pass, &world.graph, &episode, &instr)?;
        let value = tape.value(loss).item();
        let pattern = tape.relu_pattern();
        if grads {
            tape.backward(loss)?;
            Ok((value, pattern, Some(tape.param_grads())))
        } else {
            Ok((value, pattern, None))
        }
    };

    let (_, _, grads) = loss_of(&store, true)?;
    let grads = grads.expect("gradients requested");
    let (_, base_pattern, _) = loss_of(&store, false)?;
    // (group, analytic, numeric, excluded)
    let mut groups: Vec<(String, Vec<f64>, Vec<f64>, usize)> = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let group = group_of(store.name(id));
        let n = store.get(id).len();
        let all: Vec<f64> = grads
            .get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let (mut analytic, mut numeric, mut excluded) = (Vec::with_capacity(n), Vec::with_capacity(n), 0);
        for (j, &a) in all.iter().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + eps;
            let (plus, p_plus, _) = loss_of(&store, false)?;
            store.get_mut(id).data_mut()[j] = orig - eps;
            let (minus, p_minus, _) = loss_of(&store, false)?;
            store.get_mut(id).data_mut()[j] = orig;
            // A difference across a ReLU kink does not estimate the derivative.
            if p_plus != base_pattern || p_minus != base_pattern {
                excluded += 1;
                continue;
            }
            analytic.push(a);
            numeric.push((plus - minus) / (2.0 * eps));
        }
        match groups.iter_mut().find(|g| g.0 == group) {
            Some(g) => {
                g.1.extend(analytic);
                g.2.extend(numeric);
                g.3 += excluded;
            }
            None => groups.push((group, analytic, numeric, excluded)),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(name, a, n, excluded)| {
            let err = relative_error(&a, &n);
            GradCheckResult {
                name,
                relative_error: err,
                tolerance,
                passed: err < tolerance,
                excluded,
            }
        })
        .collect())
}
