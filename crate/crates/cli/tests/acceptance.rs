//! End-to-end acceptance criteria. Each test prints one `ACCEPTANCE` line.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossmap_core::crossmap::{end_to_end_gradcheck, trace, Cmt, FeatureDims, ModelConfig, Pass};
use crossmap_core::metrics::{bleu4, nav_metrics, rouge_l, CaptionMetric, CiderCorpus, MetricsReport, NavOutcome};
use crossmap_core::navworld::{
    candidate_actions, generate_episodes, generate_world, step, Episode, EpisodeSpec, NavGraph, NodeIx, Pose,
    StepOutcome, TemplateGrammar, World, WorldSpec,
};
use crossmap_core::numerics::gradcheck::check_all_ops;
use crossmap_core::numerics::{masked_softmax, ParamStore, Tape, Tensor};
use crossmap_core::textcodec::{EncodedInstruction, Vocabulary, MAX_INSTR, PAD};
use crossmap_core::trainer::{
    dbt_round, evaluate, finetune, generate_for, pretrain, teacher_forced_accuracy, Agent, Dataset, DatasetRole,
    DbtData, DbtState, Policy,
};

/// Written to the stderr handle directly so the line shows without
/// `--nocapture`.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE {n} {:<4} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Settings for the scaled-down experiments: the architecture at toy width,
/// a small batch and standard Adam moments.
fn toy_config() -> ModelConfig {
    ModelConfig {
        batch_size: 4,
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        env_dropout: 0.0,
        ..ModelConfig::toy()
    }
}

fn toy_world(seed: u64) -> World {
    let spec = WorldSpec {
        num_nodes: 30,
        d_sem: 30,
        d_vis: 16,
        ..WorldSpec::default()
    };
    generate_world(seed, &spec).unwrap()
}

fn toy_episodes(world: &World, seed: u64, count: usize, prefix: &str) -> Vec<Episode> {
    let spec = EpisodeSpec {
        count,
        id_prefix: prefix.into(),
        ..EpisodeSpec::default()
    };
    generate_episodes(seed, world, &spec, &TemplateGrammar::default()).unwrap()
}

fn new_agent(world: &World, train: &[Episode], config: ModelConfig, seed: u64) -> Agent {
    let texts: Vec<&str> = train.iter().map(|e| e.instruction.as_str()).collect();
    let dims = FeatureDims {
        d_sem: world.d_sem,
        d_vis: world.d_vis,
    };
    Agent::new(config, Vocabulary::build(&texts, 1), dims, CaptionMetric::Cider, seed).unwrap()
}

fn train_set(eps: &[Episode]) -> Dataset {
    Dataset::new(DatasetRole::Train, eps.to_vec())
}

// 1. Gradient suite.

#[test]
fn criterion_1_gradient_suite() {
    let t = Instant::now();
    let ops = check_all_ops(0, 1e-3, 1e-4).unwrap();
    let model = end_to_end_gradcheck(0, 1e-3, 1e-3).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = |rs: &[crossmap_core::numerics::gradcheck::GradCheckResult]| {
        rs.iter().map(|r| r.relative_error).fold(0.0, f64::max)
    };
    let failed: Vec<&str> = ops.iter().chain(&model).filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let pass = failed.is_empty() && ops.iter().all(|r| r.tolerance <= 1e-4) && secs < 60.0;
    report(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} op checks (worst {:.2e}), {} model checks (worst {:.2e}, {} kink coordinates skipped), {secs:.1} s, failed {failed:?}",
            ops.len(),
            worst(&ops),
            model.len(),
            worst(&model),
            model.iter().map(|r| r.excluded).sum::<usize>()
        ),
    );
    assert!(pass);
}

// 2. Mask causality.

struct SmallModel {
    world: World,
    episodes: Vec<Episode>,
    vocab: Vocabulary,
    config: ModelConfig,
    store: ParamStore,
    cmt: Cmt,
}

fn small_model(seed: u64) -> SmallModel {
    let world = generate_world(
        seed,
        &WorldSpec {
            num_nodes: 16,
            d_sem: 30,
            d_vis: 8,
            ..WorldSpec::default()
        },
    )
    .unwrap();
    let episodes = toy_episodes(&world, seed, 8, "ep");
    let texts: Vec<&str> = episodes.iter().map(|e| e.instruction.as_str()).collect();
    let vocab = Vocabulary::build(&texts, 1);
    let config = ModelConfig {
        hidden: 8,
        heads: 2,
        ff_size: 16,
        max_path: 8,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let dims = FeatureDims {
        d_sem: world.d_sem,
        d_vis: world.d_vis,
    };
    let cmt = Cmt::new(&mut store, &config, dims, vocab.len(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    SmallModel {
        world,
        episodes,
        vocab,
        config,
        store,
        cmt,
    }
}

/// Random non-STOP moves from `pose`, as candidate indices.
fn random_walk(graph: &NavGraph, mut pose: Pose, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut moves = Vec::with_capacity(len);
    for _ in 0..len {
        let cands = candidate_actions(graph, &pose);
        let options: Vec<usize> = (0..cands.len()).filter(|&i| !cands[i].is_stop()).collect();
        let &choice = options.choose(rng).expect("connected graph");
        pose = match step(graph, &pose, &cands[choice]).unwrap() {
            StepOutcome::Moved(p) => p,
            StepOutcome::Terminal => unreachable!("not a stop"),
        };
        moves.push(choice);
    }
    moves
}

fn walk_from(graph: &NavGraph, start: Pose, moves: &[usize]) -> Pose {
    let mut pose = start;
    for &m in moves {
        let cands = candidate_actions(graph, &pose);
        if let StepOutcome::Moved(p) = step(graph, &pose, &cands[m]).unwrap() {
            pose = p;
        }
    }
    pose
}

fn probs(logits: &Tensor) -> Vec<f64> {
    masked_softmax(logits, None).unwrap().0.data().to_vec()
}

/// Candidate distributions at every position of an evaluation-mode trace.
fn trace_distributions(m: &SmallModel, instr: &EncodedInstruction, start: Pose, moves: &[usize]) -> Vec<Vec<f64>> {
    let mut tape = Tape::with_params(&m.store, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pass = Pass {
        tape: &mut tape,
        rng: &mut rng,
        training: false,
        config: &m.config,
    };
    let tr = trace(&m.cmt, &mut pass, &m.world.graph, instr, start, moves, None).unwrap();
    tr.logits
        .iter()
        .map(|&l| probs(tape.value(l)))
        .collect()
}

fn cls_summary(m: &SmallModel, instr: &EncodedInstruction, padding_from: &EncodedInstruction, pose: Pose) -> Vec<f64> {
    let mut tape = Tape::with_params(&m.store, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pass = Pass {
        tape: &mut tape,
        rng: &mut rng,
        training: false,
        config: &m.config,
    };
    let tokens = m.cmt.embed_instruction(&mut pass, instr).unwrap();
    let s = m
        .cmt
        .step_state(&mut pass, &m.world.graph, pose, tokens, &padding_from.mask_row())
        .unwrap();
    let mut out = tape.value(s.h_l0).data().to_vec();
    out.extend_from_slice(tape.value(s.h_v0).data());
    out
}

#[test]
fn criterion_2_mask_causality() {
    let m = small_model(11);
    let graph = &m.world.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 100;
    let (mut future_ok, mut pad_ok, mut perturbed_changed) = (0, 0, 0);
    for _ in 0..trials {
        let content: Vec<usize> = (0..rng.random_range(1..MAX_INSTR - 4))
            .map(|_| rng.random_range(4..m.vocab.len()))
            .collect();
        let instr = EncodedInstruction::from_ids(&content);
        let start = Pose::new(NodeIx(rng.random_range(0..graph.len())), rng.random_range(0.0..std::f64::consts::TAU));
        let len = rng.random_range(2..=m.config.max_path);
        let base = random_walk(graph, start, len, &mut rng);
        let t = rng.random_range(0..len);
        let tail_start = walk_from(graph, start, &base[..t]);
        let mut perturbed = base[..t].to_vec();
        perturbed.extend(random_walk(graph, tail_start, rng.random_range(1..=m.config.max_path - t), &mut rng));
        let a = trace_distributions(&m, &instr, start, &base);
        let b = trace_distributions(&m, &instr, start, &perturbed);
        if a[..=t] == b[..=t] {
            future_ok += 1;
        }
        if a[t + 1..] != b[t + 1..] {
            perturbed_changed += 1;
        }

        let mut altered = instr.clone();
        for id in altered.ids[instr.length..].iter_mut() {
            *id = rng.random_range(4..m.vocab.len());
        }
        assert!(instr.length < MAX_INSTR && instr.ids[instr.length] == PAD);
        if cls_summary(&m, &instr, &instr, start) == cls_summary(&m, &altered, &instr, start) {
            pad_ok += 1;
        }
    }
    let pass = future_ok == trials && pad_ok == trials;
    report(
        2,
        "mask causality",
        pass,
        &format!(
            "{future_ok}/{trials} prefixes bitwise invariant to future moves ({perturbed_changed} futures changed later steps), {pad_ok}/{trials} summaries invariant to PAD content"
        ),
    );
    assert!(pass);
}

// 3. Normalization.

#[test]
fn criterion_3_normalization() {
    let models: Vec<SmallModel> = (0..4).map(|s| small_model(20 + s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut rows, mut dists, mut worst) = (0usize, 0usize, 0.0f64);
    let mut fully_masked = 0;
    for pass_ix in 0..1000 {
        let m = &models[pass_ix % models.len()];
        let graph = &m.world.graph;
        let ep = m.episodes.choose(&mut rng).unwrap();
        let instr = m.vocab.encode(&ep.instruction);
        let start = Pose::new(NodeIx(rng.random_range(0..graph.len())), rng.random_range(0.0..std::f64::consts::TAU));
        let moves = random_walk(graph, start, rng.random_range(0..=3), &mut rng);
        let mut tape = Tape::with_params(&m.store, false);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(pass_ix as u64);
        let mut pass = Pass {
            tape: &mut tape,
            rng: &mut drop_rng,
            training: false,
            config: &m.config,
        };
        let tr = trace(&m.cmt, &mut pass, graph, &instr, start, &moves, None).unwrap();
        for &v in tape.softmax_outputs() {
            let t = tape.value(v);
            for r in 0..t.rows() {
                worst = worst.max((t.row_slice(r).iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
        for &l in &tr.logits {
            let p = probs(tape.value(l));
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
            dists += 1;
        }
        fully_masked += tape.fully_masked_rows();
    }
    let pass = worst <= 1e-9 && fully_masked == 0;
    report(
        3,
        "normalization",
        pass,
        &format!("1000 passes, {rows} attention rows, {dists} candidate distributions, max |sum - 1| = {worst:.2e}"),
    );
    assert!(pass);
}

// 4. Metric oracles.

/// Independent scorer: same geodesic table, separate bookkeeping.
fn oracle_scores(graph: &NavGraph, outcomes: &[NavOutcome]) -> (f64, f64, f64, f64) {
    let table = graph.distance_table();
    let (mut s, mut ne, mut ne_n, mut spl, mut os) = (0.0, 0.0, 0usize, 0.0, 0.0);
    for o in outcomes {
        let nodes: Vec<NodeIx> = o.path.iter().map(|id| graph.ix(id).unwrap()).collect();
        let goal = graph.ix(&o.goal).unwrap();
        let mut travelled = 0.0;
        for w in nodes.windows(2) {
            travelled += graph.edge(w[0], w[1]).unwrap().distance;
        }
        let d_end = table.get(*nodes.last().unwrap(), goal);
        let d_start = table.get(nodes[0], goal);
        let ok = !o.truncated && matches!(d_end, Some(d) if d <= 3.0);
        if let Some(d) = d_end {
            ne += d;
            ne_n += 1;
        }
        if ok {
            s += 1.0;
            let l = d_start.unwrap();
            spl += if travelled.max(l) == 0.0 { 1.0 } else { l / travelled.max(l) };
        }
        if nodes.iter().any(|&n| matches!(table.get(n, goal), Some(d) if d <= 3.0)) {
            os += 1.0;
        }
    }
    let n = outcomes.len() as f64;
    (s / n, if ne_n == 0 { 0.0 } else { ne / ne_n as f64 }, spl / n, os / n)
}

fn random_outcomes(graph: &NavGraph, n: usize, rng: &mut ChaCha8Rng) -> Vec<NavOutcome> {
    (0..n)
        .map(|i| {
            let start = NodeIx(rng.random_range(0..graph.len()));
            let goal = NodeIx(rng.random_range(0..graph.len()));
            let mut path = vec![start];
            for _ in 0..rng.random_range(0..8) {
                let here = *path.last().unwrap();
                let next = graph.edges(here).choose(rng).unwrap().to;
                path.push(next);
            }
            NavOutcome {
                episode_id: format!("o{i}"),
                path: graph.path_ids(&path),
                goal: graph.node(goal).id.clone(),
                truncated: rng.random_bool(0.1),
            }
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-6
}

#[test]
fn criterion_4_metric_oracles() {
    let world = generate_world(
        4,
        &WorldSpec {
            num_nodes: 20,
            d_sem: 30,
            d_vis: 8,
            ..WorldSpec::default()
        },
    )
    .unwrap();
    let graph = &world.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut equal = 0;
    let rounds = 10;
    for _ in 0..rounds {
        let outcomes = random_outcomes(graph, 100, &mut rng);
        let r = nav_metrics(graph, &outcomes).unwrap();
        if (r.sr, r.ne, r.spl, r.osr) == oracle_scores(graph, &outcomes) {
            equal += 1;
        }
        reports.push(r);
    }
    let ordered = reports.iter().all(|r| r.spl <= r.sr && r.osr >= r.sr);

    // Hand-computed caption cases.
    let bleu_exact = bleu4("walk past the sofa and stop", &["walk past the sofa and stop"]);
    // 5 of 5 unigrams, 3 of 4 bigrams, 2 of 3 trigrams and 1 of 2 4-grams
    // match; brevity penalty exp(1 - 6/5).
    let bleu_short = bleu4("the cat sat on mat", &["the cat sat on the mat"]);
    let bleu_short_hand = 100.0 * (-0.2f64).exp() * (1.0 * 0.75 * (2.0 / 3.0) * 0.5f64).powf(0.25);
    // LCS "a c d" = 3: precision 3/4, recall 3/5, beta 1.2.
    let rouge = rouge_l("a b c d", &["a c d e f"]);
    let (p, r, b2) = (0.75, 0.6, 1.44);
    let rouge_hand = 100.0 * (1.0 + b2) * p * r / (r + b2 * p);
    // Two documents: unigram and bigram cosines are 1, no trigrams or
    // 4-grams, so the mean over four orders is 1/2.
    let corpus = CiderCorpus::new(&[vec!["turn left"], vec!["go right"]]);
    let cider_exact = corpus.score("turn left", &["turn left"]);
    // Unigram cosine 1/2, unseen bigram contributes 0.
    let cider_half = corpus.score("turn right", &["turn left"]);
    let captions = [
        (bleu_exact, 100.0),
        (bleu_short, bleu_short_hand),
        (rouge, rouge_hand),
        (cider_exact, 50.0),
        (cider_half, 12.5),
    ];
    let captions_ok = captions.iter().all(|&(a, b)| close(a, b));
    let pass = equal == rounds && ordered && captions_ok;
    report(
        4,
        "metric oracles",
        pass,
        &format!("{equal}/{rounds} reports of 100 outcomes exactly equal, ordering {ordered}, captions {captions:?}"),
    );
    assert!(pass);
}

// 5. Overfit.

struct Overfit {
    world: World,
    episodes: Vec<Episode>,
    agent: Agent,
    epochs: usize,
    tf: f64,
    sr: f64,
    secs: f64,
}

const OVERFIT_PRETRAIN: usize = 150;
const OVERFIT_BUDGET: usize = 500;

fn overfit() -> &'static Overfit {
    static CELL: OnceLock<Overfit> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let world = toy_world(1);
        let episodes = toy_episodes(&world, 1, 16, "ep");
        let mut agent = new_agent(&world, &episodes, toy_config(), 1);
        let ds = train_set(&episodes);
        pretrain(&mut agent, &world.graph, &ds, OVERFIT_PRETRAIN, true).unwrap();
        let mut epochs = OVERFIT_PRETRAIN;
        let (mut tf, mut sr) = (0.0, 0.0);
        while epochs < OVERFIT_BUDGET {
            finetune(&mut agent, &world.graph, &ds, &[], 10).unwrap();
            epochs += 10;
            tf = teacher_forced_accuracy(&agent, &world.graph, &episodes).unwrap();
            sr = evaluate(&agent, &world.graph, &episodes, Policy::Greedy).unwrap().sr;
            if tf >= 0.95 && sr >= 0.9 {
                break;
            }
        }
        Overfit {
            world,
            episodes,
            agent,
            epochs,
            tf,
            sr,
            secs: t.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_5_overfit() {
    let o = overfit();
    let stop = evaluate(&o.agent, &o.world.graph, &o.episodes, Policy::AlwaysStop).unwrap().sr;
    let pass = o.tf >= 0.95 && o.sr >= 0.9 && o.epochs <= OVERFIT_BUDGET && o.secs < 900.0 && stop <= 0.1;
    report(
        5,
        "overfit",
        pass,
        &format!(
            "tf accuracy {:.3}, greedy SR {:.3} after {} epochs in {:.0} s; always-STOP SR {stop:.3}",
            o.tf, o.sr, o.epochs, o.secs
        ),
    );
    assert!(pass);
}

// 6. Speaker overfit.

#[test]
fn criterion_6_speaker_overfit() {
    let world = toy_world(6);
    let episodes = toy_episodes(&world, 6, 8, "sp");
    let mut agent = new_agent(&world, &episodes, toy_config(), 6);
    let ds = train_set(&episodes);
    let mut epochs = 0;
    let mut scores = Vec::new();
    while epochs < 600 {
        pretrain(&mut agent, &world.graph, &ds, 50, true).unwrap();
        epochs += 50;
        scores = episodes
            .iter()
            .map(|ep| bleu4(&generate_for(&agent, &world.graph, ep).unwrap().0, &[&ep.instruction]))
            .collect();
        if scores.iter().all(|&s| s >= 90.0) {
            break;
        }
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = min >= 90.0;
    report(
        6,
        "speaker overfit",
        pass,
        &format!("min BLEU-4 {min:.1} over 8 pairs after {epochs} epochs: {scores:.1?}"),
    );
    assert!(pass);
}

// 7. Back-translation integration.

#[test]
fn criterion_7_dbt_integration() {
    let o = overfit();
    let graph = &o.world.graph;
    let validation = Dataset::new(DatasetRole::ValSeen, toy_episodes(&o.world, 71, 8, "val"));
    let unlabeled = Dataset::new(DatasetRole::Unlabeled, toy_episodes(&o.world, 72, 8, "unl"));
    let train = train_set(&o.episodes);
    let data = DbtData {
        train: &train,
        validation: Some(&validation),
        unlabeled: Some(&unlabeled),
    };
    let thresholds = [0.0, 10.0, 20.0, 50.0, f64::INFINITY];
    let mut rows = Vec::new();
    let mut invariants = true;
    let mut all_stages = false;
    let mut frozen_at_inf = false;
    for &lambda in &thresholds {
        let mut agent = o.agent.clone();
        agent.config.lambda_threshold = lambda;
        let mut state = DbtState::default();
        let log = dbt_round(&mut agent, &mut state, graph, &data, 2).unwrap();
        invariants &= state.successful_trajectories.iter().all(|t| t.success)
            && state.generated_instructions.iter().all(|s| s.score >= lambda);
        if lambda == 0.0 {
            all_stages = log.stage1_pool > 0
                && !log.stage1_speaker_loss.is_empty()
                && log.stage2_kept > 0
                && !log.stage2_nav_loss.is_empty()
                && log.stage3_gate
                && !log.stage3_nav_loss.is_empty();
        }
        if lambda.is_infinite() {
            frozen_at_inf = log.stage2_kept == 0
                && log.stage3_kept == 0
                && log.stage2_nav_loss.is_empty()
                && log.stage3_nav_loss.is_empty()
                && log.cmt_checksum_after_stage1 == log.cmt_checksum_after;
        }
        rows.push((lambda, log.stage2_kept, log.stage3_kept, log.speaker_val_score));
    }
    let monotone = rows.windows(2).all(|w| w[0].1 >= w[1].1 && w[0].2 >= w[1].2);
    let pass = invariants && all_stages && monotone && frozen_at_inf;
    report(
        7,
        "dbt integration",
        pass,
        &format!(
            "all stages {all_stages}, invariants {invariants}, monotone {monotone}, frozen at inf {frozen_at_inf}; (lambda, stage2 kept, stage3 kept, val score) {rows:?}"
        ),
    );
    assert!(pass);
}

// 8. Pipeline determinism.

fn crossmap(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_crossmap")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "crossmap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const PIPELINE_CONFIG: &str = r#"
hidden = 16
heads = 2
ff_size = 32
batch_size = 4
lr = 0.001
beta1 = 0.9
beta2 = 0.999
env_dropout = 0.0
lambda_threshold = 0.0
"#;

fn write_plan(dir: &Path, name: &str, phase: &str, epochs: usize, init: Option<&str>) {
    let init = init.map(|p| format!("init = \"{p}\"\n")).unwrap_or_default();
    let text = format!(
        "version = 1\nphase = \"{phase}\"\nepochs = {epochs}\nseed = 5\ndbt_rounds = 1\n{init}\n[data]\nworld = \"world.json\"\ntrain = \"train.json\"\nval_seen = \"val.json\"\nunlabeled = \"unlabeled.json\"\n\n[config]{PIPELINE_CONFIG}"
    );
    std::fs::write(dir.join(name), text).unwrap();
}

fn pipeline(dir: &Path) -> Vec<u8> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    crossmap(&["gen-world", "--seed", "8", "--nodes", "16", "--out", &p("world.json")]);
    for (name, seed) in [("train.json", "1"), ("val.json", "2"), ("unlabeled.json", "3")] {
        crossmap(&[
            "gen-episodes",
            "--world",
            &p("world.json"),
            "--count",
            "6",
            "--seed",
            seed,
            "--id-prefix",
            &name[..3],
            "--out",
            &p(name),
        ]);
    }
    write_plan(dir, "pretrain.toml", "pretrain", 2, None);
    write_plan(dir, "train.toml", "finetune", 2, Some("pretrain/checkpoint.bin"));
    write_plan(dir, "dbt.toml", "dbt", 1, Some("train/checkpoint.bin"));
    crossmap(&["pretrain", "--plan", &p("pretrain.toml"), "--out", &p("pretrain")]);
    crossmap(&["train", "--plan", &p("train.toml"), "--out", &p("train")]);
    crossmap(&["dbt", "--plan", &p("dbt.toml"), "--out", &p("dbt")]);
    crossmap(&[
        "evaluate",
        "--model",
        &p("dbt/checkpoint.bin"),
        "--world",
        &p("world.json"),
        "--episodes",
        &p("val.json"),
        "--out",
        &p("report.json"),
    ]);
    std::fs::read(dir.join("report.json")).unwrap()
}

#[test]
fn criterion_8_pipeline_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());
    let parsed: MetricsReport = serde_json::from_slice(&ra).unwrap();
    let pass = ra == rb && parsed.count == 6;
    report(
        8,
        "pipeline determinism",
        pass,
        &format!("{} byte reports identical: {}, SR {:.3}", ra.len(), ra == rb, parsed.sr),
    );
    assert!(pass);
}

// 9. Ablation direction.

const ABLATION_SEEDS: [u64; 5] = [101, 102, 103, 104, 105];
const ABLATION_NODES: usize = 16;
const ABLATION_EPISODES: usize = 64;
const ABLATION_MAX_EDGES: usize = 4;
const ABLATION_PRETRAIN: usize = 40;
const ABLATION_FINETUNE: usize = 15;
const ABLATION_DBT_EPOCHS: usize = 5;

fn ablation_episodes(world: &World, seed: u64, count: usize, prefix: &str) -> Vec<Episode> {
    let spec = EpisodeSpec {
        count,
        id_prefix: prefix.into(),
        max_edges: ABLATION_MAX_EDGES,
        ..EpisodeSpec::default()
    };
    generate_episodes(seed, world, &spec, &TemplateGrammar::default()).unwrap()
}

/// Greedy SR on held-out episodes for (full, no DBT, no DBT and no path
/// masking) from one seed. The world is small enough that held-out paths
/// share most of their edges with training paths.
fn ablation_run(seed: u64) -> [f64; 3] {
    let world = generate_world(
        seed,
        &WorldSpec {
            num_nodes: ABLATION_NODES,
            d_sem: 30,
            d_vis: 16,
            ..WorldSpec::default()
        },
    )
    .unwrap();
    let train = ablation_episodes(&world, seed, ABLATION_EPISODES, "tr");
    let val = ablation_episodes(&world, seed + 1000, ABLATION_EPISODES, "va");
    let ds = train_set(&train);
    let sr = |agent: &Agent| evaluate(agent, &world.graph, &val, Policy::Greedy).unwrap().sr;

    let mut type1 = new_agent(&world, &train, toy_config(), seed);
    pretrain(&mut type1, &world.graph, &ds, ABLATION_PRETRAIN, false).unwrap();
    finetune(&mut type1, &world.graph, &ds, &[], ABLATION_FINETUNE).unwrap();

    let mut type2 = new_agent(&world, &train, toy_config(), seed);
    pretrain(&mut type2, &world.graph, &ds, ABLATION_PRETRAIN, true).unwrap();
    finetune(&mut type2, &world.graph, &ds, &[], ABLATION_FINETUNE).unwrap();

    let mut full = type2.clone();
    let validation = Dataset::new(DatasetRole::ValSeen, ablation_episodes(&world, seed + 3000, 8, "sv"));
    let unl = Dataset::new(
        DatasetRole::Unlabeled,
        ablation_episodes(&world, seed + 2000, ABLATION_EPISODES / 2, "un"),
    );
    let data = DbtData {
        train: &ds,
        validation: Some(&validation),
        unlabeled: Some(&unl),
    };
    dbt_round(&mut full, &mut DbtState::default(), &world.graph, &data, ABLATION_DBT_EPOCHS).unwrap();
    [sr(&full), sr(&type2), sr(&type1)]
}

#[test]
fn criterion_9_ablation_direction() {
    let runs: Vec<[f64; 3]> = ABLATION_SEEDS.iter().map(|&s| ablation_run(s)).collect();
    let mean = |k: usize| runs.iter().map(|r| r[k]).sum::<f64>() / runs.len() as f64;
    let (full, type2, type1) = (mean(0), mean(1), mean(2));
    let pass = full >= type2 && type2 >= type1;
    report(
        9,
        "ablation direction",
        pass,
        &format!("mean SR full {full:.3} >= no DBT {type2:.3} >= no DBT/no masking {type1:.3}; per seed {runs:?}"),
    );
    assert!(pass);
}
