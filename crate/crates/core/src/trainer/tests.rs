use std::path::PathBuf;

use proptest::prelude::*;

use super::*;
use crate::crossmap::{FeatureDims, ModelConfig};
use crate::metrics::{nav_metrics, CaptionMetric};
use crate::navworld::{generate_episodes, generate_world, Episode, EpisodeSpec, TemplateGrammar, World, WorldSpec};
use crate::textcodec::Vocabulary;

fn fixture(count: usize) -> (World, Vec<Episode>) {
    let world = generate_world(
        3,
        &WorldSpec {
            num_nodes: 14,
            d_sem: 30,
            d_vis: 8,
            ..WorldSpec::default()
        },
    )
    .unwrap();
    let spec = EpisodeSpec {
        count,
        max_edges: 4,
        ..EpisodeSpec::default()
    };
    let eps = generate_episodes(3, &world, &spec, &TemplateGrammar::default()).unwrap();
    (world, eps)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        ff_size: 32,
        batch_size: 4,
        ..ModelConfig::default()
    }
}

fn agent_for(world: &World, eps: &[Episode], config: ModelConfig, seed: u64) -> Agent {
    let texts: Vec<&str> = eps.iter().map(|e| e.instruction.as_str()).collect();
    let dims = FeatureDims {
        d_sem: world.d_sem,
        d_vis: world.d_vis,
    };
    Agent::new(config, Vocabulary::build(&texts, 1), dims, CaptionMetric::Cider, seed).unwrap()
}

fn train(eps: &[Episode]) -> Dataset {
    Dataset::new(DatasetRole::Train, eps.to_vec())
}

#[test]
fn empty_dataset_is_a_no_op() {
    let (world, eps) = fixture(4);
    let mut agent = agent_for(&world, &eps, small_config(), 1);
    let before = (agent.cmt_checksum(), agent.cms_checksum());
    let empty = train(&[]);
    let logs = pretrain(&mut agent, &world.graph, &empty, 2, true).unwrap();
    assert_eq!(logs.len(), 2);
    assert!(logs.iter().all(|l| l.episodes == 0 && l.nav_loss == 0.0));
    finetune(&mut agent, &world.graph, &empty, &[], 1).unwrap();
    assert_eq!((agent.cmt_checksum(), agent.cms_checksum()), before);
    assert_eq!(agent.optimizer.steps_taken(), 0);
}

#[test]
fn training_is_deterministic() {
    let (world, eps) = fixture(6);
    let run = || {
        let mut agent = agent_for(&world, &eps, small_config(), 9);
        let a = pretrain(&mut agent, &world.graph, &train(&eps), 2, true).unwrap();
        let b = finetune(&mut agent, &world.graph, &train(&eps), &[], 1).unwrap();
        (agent.cmt_checksum(), agent.cms_checksum(), a, b)
    };
    assert_eq!(run(), run());
}

#[test]
fn different_seeds_diverge() {
    let (world, eps) = fixture(4);
    let a = agent_for(&world, &eps, small_config(), 1);
    let b = agent_for(&world, &eps, small_config(), 2);
    assert_ne!(a.cmt_checksum(), b.cmt_checksum());
}

#[test]
fn pretraining_reduces_losses() {
    let (world, eps) = fixture(4);
    let config = ModelConfig {
        env_dropout: 0.0,
        lr: 2e-3,
        beta1: 0.9,
        beta2: 0.999,
        ..small_config()
    };
    let mut agent = agent_for(&world, &eps, config, 4);
    let logs = pretrain(&mut agent, &world.graph, &train(&eps), 40, true).unwrap();
    let mean = |ls: &[EpochLog], f: fn(&EpochLog) -> f64| ls.iter().map(f).sum::<f64>() / ls.len() as f64;
    let (head, tail) = (&logs[..5], &logs[35..]);
    assert!(mean(tail, |l| l.nav_loss) < mean(head, |l| l.nav_loss));
    assert!(mean(tail, |l| l.speaker_loss) < mean(head, |l| l.speaker_loss));
}

#[test]
fn evaluation_leaves_parameters_unchanged() {
    let (world, eps) = fixture(4);
    let agent = agent_for(&world, &eps, small_config(), 5);
    let before = agent.cmt_checksum();
    for p in [Policy::Greedy, Policy::Sample] {
        evaluate(&agent, &world.graph, &eps, p).unwrap();
    }
    teacher_forced_accuracy(&agent, &world.graph, &eps).unwrap();
    assert_eq!(agent.cmt_checksum(), before);
    assert_eq!(agent.optimizer.steps_taken(), 0);
}

#[test]
fn oracle_succeeds_and_stopping_fails() {
    let (world, eps) = fixture(10);
    let agent = agent_for(&world, &eps, small_config(), 5);
    let oracle = evaluate(&agent, &world.graph, &eps, Policy::Oracle).unwrap();
    assert_eq!(oracle.sr, 1.0);
    assert!((oracle.spl - 1.0).abs() < 1e-12);
    let stop = evaluate(&agent, &world.graph, &eps, Policy::AlwaysStop).unwrap();
    assert_eq!(stop.sr, 0.0);
}

#[test]
fn sampled_rollout_scores_match_hand_computation() {
    let (world, eps) = fixture(6);
    let agent = agent_for(&world, &eps, small_config(), 8);
    let g = &world.graph;
    let outcomes = run_policy(&agent, g, &eps, Policy::Sample).unwrap();
    let report = nav_metrics(g, &outcomes).unwrap();
    let mut successes = 0.0;
    for (o, s) in outcomes.iter().zip(&report.episodes) {
        let path = g.resolve_path(&o.path).unwrap();
        let goal = g.ix(&o.goal).unwrap();
        let d = g.shortest_paths_from(goal).distance(*path.last().unwrap()).unwrap();
        let ok = !o.truncated && d <= 3.0;
        assert_eq!(s.success, ok, "{}", o.episode_id);
        assert!((s.ne.unwrap() - d).abs() < 1e-12);
        assert!((s.path_length - g.path_length(&path).unwrap()).abs() < 1e-12);
        successes += f64::from(u8::from(ok));
    }
    assert!((report.sr - successes / eps.len() as f64).abs() < 1e-15);
    assert!(report.spl <= report.sr && report.osr >= report.sr);
}

#[test]
fn validation_splits_are_rejected_for_training() {
    let (world, eps) = fixture(2);
    let mut agent = agent_for(&world, &eps, small_config(), 1);
    for role in [DatasetRole::ValSeen, DatasetRole::ValUnseen] {
        let ds = Dataset::new(role, eps.clone());
        assert!(matches!(
            pretrain(&mut agent, &world.graph, &ds, 1, true),
            Err(TrainError::Role(r)) if r == role
        ));
        assert!(matches!(
            finetune(&mut agent, &world.graph, &ds, &[], 1),
            Err(TrainError::Role(_))
        ));
    }
    let t = train(&eps);
    let v = Dataset::new(DatasetRole::ValSeen, eps.clone());
    let mut state = DbtState::default();
    let data = DbtData {
        train: &v,
        validation: None,
        unlabeled: None,
    };
    assert!(dbt_round(&mut agent, &mut state, &world.graph, &data, 1).is_err());
    let data = DbtData {
        train: &t,
        validation: None,
        unlabeled: Some(&v),
    };
    assert!(dbt_round(&mut agent, &mut state, &world.graph, &data, 1).is_err());
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let (world, eps) = fixture(4);
    let ds = train(&eps);
    let mut straight = agent_for(&world, &eps, small_config(), 6);
    pretrain(&mut straight, &world.graph, &ds, 2, true).unwrap();
    let expected = pretrain(&mut straight, &world.graph, &ds, 1, true).unwrap();

    let mut first = agent_for(&world, &eps, small_config(), 6);
    pretrain(&mut first, &world.graph, &ds, 2, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.bin");
    first.save(&path).unwrap();
    let mut resumed = Agent::load(&path).unwrap();
    assert_eq!(resumed.cmt_checksum(), first.cmt_checksum());
    assert_eq!(resumed.cms_checksum(), first.cms_checksum());
    assert_eq!(resumed.progress, first.progress);
    assert_eq!(resumed.optimizer.steps_taken(), first.optimizer.steps_taken());
    assert_eq!(resumed.vocab, first.vocab);
    let got = pretrain(&mut resumed, &world.graph, &ds, 1, true).unwrap();
    assert_eq!(got, expected);
    assert_eq!(resumed.cmt_checksum(), straight.cmt_checksum());
}

#[test]
fn infinite_threshold_trains_no_generated_pairs() {
    let (world, eps) = fixture(6);
    let config = ModelConfig {
        lambda_threshold: f64::INFINITY,
        ..small_config()
    };
    let mut agent = agent_for(&world, &eps, config, 2);
    let (tr, val) = eps.split_at(4);
    let t = train(tr);
    let v = Dataset::new(DatasetRole::ValSeen, val.to_vec());
    let u = Dataset::new(DatasetRole::Unlabeled, val.to_vec());
    let mut state = DbtState::default();
    let data = DbtData {
        train: &t,
        validation: Some(&v),
        unlabeled: Some(&u),
    };
    let log = dbt_round(&mut agent, &mut state, &world.graph, &data, 1).unwrap();
    assert_eq!(log.stage2_generated, 4);
    assert_eq!(log.stage2_kept, 0);
    assert_eq!(log.stage3_kept, 0);
    assert!(!log.stage3_gate);
    assert!(state.generated_instructions.is_empty());
    assert_eq!(log.cmt_checksum_after_stage1, log.cmt_checksum_after);
    assert_eq!(log.cmt_checksum_before, log.cmt_checksum_after);
    assert_eq!(agent.progress.dbt_rounds, 1);
}

#[test]
fn zero_threshold_keeps_every_generated_pair() {
    let (world, eps) = fixture(4);
    let config = ModelConfig {
        lambda_threshold: 0.0,
        ..small_config()
    };
    let mut agent = agent_for(&world, &eps, config, 2);
    let t = train(&eps);
    let mut state = DbtState::default();
    let data = DbtData {
        train: &t,
        validation: None,
        unlabeled: None,
    };
    let log = dbt_round(&mut agent, &mut state, &world.graph, &data, 1).unwrap();
    assert_eq!(log.stage2_kept, 4);
    assert_eq!(log.stage2_nav_loss.len(), 1);
    assert_ne!(log.cmt_checksum_after_stage1, log.cmt_checksum_after);
    assert!(state.successful_trajectories.iter().all(|t| t.success));
    assert!(state.generated_instructions.iter().all(|s| s.score >= 0.0 && s.stage == 2));
}

#[test]
fn pools_reject_invariant_violations() {
    let (world, eps) = fixture(1);
    let agent = agent_for(&world, &eps, small_config(), 1);
    let mut state = DbtState::default();
    let instr = agent.vocab.encode(&eps[0].instruction);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut r = crate::crossmap::rollout(
        &agent.cmt,
        &agent.store,
        &agent.config,
        &world.graph,
        &eps[0],
        &instr,
        crate::crossmap::RolloutMode::Greedy,
        &mut rng,
    )
    .unwrap();
    r.success = false;
    assert!(matches!(state.admit_trajectory(r), Err(TrainError::Invariant(_))));
    let s = ScoredInstruction {
        episode_id: "e".into(),
        path: vec![],
        text: "go".into(),
        ids: vec![],
        score: 4.0,
        metric: "cider".into(),
        stage: 2,
    };
    assert!(matches!(state.admit_instruction(s.clone(), 5.0), Err(TrainError::Invariant(_))));
    assert!(state.admit_instruction(s, 4.0).is_ok());
}

use rand::SeedableRng;

fn plan(dir: &std::path::Path) -> TrainPlan {
    let world = dir.join("world.json");
    let train = dir.join("train.json");
    std::fs::write(&world, "{}").unwrap();
    std::fs::write(&train, "[]").unwrap();
    TrainPlan {
        version: PLAN_VERSION,
        phase: Phase::Pretrain,
        epochs: 1,
        seed: 0,
        config: ModelConfig::toy(),
        data: DataRefs {
            world,
            train,
            val_seen: None,
            val_unseen: None,
            unlabeled: None,
        },
        metric: "cider".into(),
        dbt_rounds: 1,
        path_masking: true,
        init: None,
    }
}

#[test]
fn plan_validation_names_offending_keys() {
    let dir = tempfile::tempdir().unwrap();
    assert!(plan(dir.path()).validate().is_ok());
    let mut p = plan(dir.path());
    p.version = 7;
    p.epochs = 0;
    p.metric = "spice".into();
    p.dbt_rounds = 0;
    p.phase = Phase::Dbt;
    p.config.heads = 5;
    p.data.val_seen = Some(PathBuf::from("/nonexistent/val.json"));
    let Err(TrainError::Plan(bad)) = p.validate() else {
        panic!("expected a plan error");
    };
    for key in ["version", "epochs", "metric", "dbt_rounds", "config", "data.val_seen"] {
        assert!(bad.iter().any(|b| b.starts_with(key)), "{key} missing from {bad:?}");
    }
}

#[test]
fn plan_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = plan(dir.path());
    p.data.train = PathBuf::from("train.json");
    p.resolve(dir.path());
    assert_eq!(p.data.train, dir.path().join("train.json"));
    assert!(p.validate().is_ok());
}

#[test]
fn derived_seeds_depend_on_every_label() {
    let a = derive_seed(1, &["pretrain", "0"]);
    assert_eq!(a, derive_seed(1, &["pretrain", "0"]));
    assert_ne!(a, derive_seed(2, &["pretrain", "0"]));
    assert_ne!(a, derive_seed(1, &["pretrain", "1"]));
    assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
}

fn scored(score: f64) -> ScoredInstruction {
    ScoredInstruction {
        episode_id: String::new(),
        path: vec![],
        text: String::new(),
        ids: vec![],
        score,
        metric: "cider".into(),
        stage: 2,
    }
}

proptest! {
    #[test]
    fn threshold_filter_is_monotone(scores in prop::collection::vec(0.0f64..100.0, 0..40)) {
        let items: Vec<_> = scores.iter().map(|&s| scored(s)).collect();
        let sizes: Vec<usize> = [0.0, 10.0, 20.0, 50.0, f64::INFINITY]
            .iter()
            .map(|&t| filter_by_threshold(&items, t).len())
            .collect();
        prop_assert_eq!(sizes[0], items.len());
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        prop_assert_eq!(sizes[4], 0);
        for &t in &[0.0, 10.0, 20.0, 50.0] {
            prop_assert!(filter_by_threshold(&items, t).iter().all(|s| s.score >= t));
        }
    }
}
