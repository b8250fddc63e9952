use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use crossmap_core::crossmap::{end_to_end_gradcheck, ModelConfig, FeatureDims};
use crossmap_core::metrics::{CaptionMetric, CiderCorpus};
use crossmap_core::navworld::{
    check_episode, generate_episodes, generate_world, load_episodes, load_world, save_episodes, save_world, Episode,
    EpisodeSpec, TemplateGrammar, World, WorldSpec,
};
use crossmap_core::numerics::gradcheck::{check_all_ops, GradCheckResult};
use crossmap_core::speaker::score_generated;
use crossmap_core::textcodec::Vocabulary;
use crossmap_core::trainer::{
    dbt_round, epoch_csv, generate_for, finetune, pretrain, run_policy, Agent, Dataset, DatasetRole, DbtData, DbtState, Phase,
    Policy, TrainPlan,
};

use crate::manifest::{beside, ManifestBuilder};
use crate::svg::PathRender;

/// Error classes mapped to exit codes 2 and 3.
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn required<T>(v: Option<T>, key: &str) -> Result<T, Failure> {
    v.ok_or_else(|| invalid(anyhow!("missing required setting --{key}")))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(runtime)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn read_world(path: &Path) -> Result<World, Failure> {
    load_world(path)
        .with_context(|| format!("loading world {}", path.display()))
        .map_err(invalid)
}

/// Loads episodes and checks every one against the world.
fn read_episodes(path: &Path, world: &World) -> Result<Vec<Episode>, Failure> {
    let episodes = load_episodes(path)
        .with_context(|| format!("loading episodes {}", path.display()))
        .map_err(invalid)?;
    for ep in &episodes {
        if ep.graph_id != world.graph.id {
            return Err(invalid(anyhow!(
                "episode {} belongs to world {:?}, not {:?}",
                ep.id,
                ep.graph_id,
                world.graph.id
            )));
        }
        check_episode(&world.graph, ep).map_err(invalid)?;
    }
    Ok(episodes)
}

fn finish(m: ManifestBuilder, path: &Path) -> Result<(), Failure> {
    m.finish(path).map(|_| ()).map_err(runtime)
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenWorldArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub d_sem: Option<usize>,
    #[arg(long)]
    pub d_vis: Option<usize>,
    #[arg(long)]
    pub floors: Option<usize>,
    #[arg(long)]
    pub graph_id: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen_world(a: GenWorldArgs) -> Result<(), Failure> {
    let out = required(a.out.clone(), "out")?;
    let seed = a.seed.unwrap_or(0);
    let mut spec = WorldSpec::default();
    if let Some(n) = a.nodes {
        spec.num_nodes = n;
    }
    if let Some(d) = a.d_sem {
        spec.d_sem = d;
    }
    if let Some(d) = a.d_vis {
        spec.d_vis = d;
    }
    if let Some(f) = a.floors {
        spec.floors = f;
    }
    if let Some(id) = a.graph_id.clone() {
        spec.graph_id = id;
    }
    let mut m = ManifestBuilder::new("gen-world", &a, Some(seed));
    let world = generate_world(seed, &spec).map_err(invalid)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    save_world(&world, &out).map_err(runtime)?;
    m.output(&out);
    println!("wrote {} ({} nodes)", out.display(), world.graph.len());
    finish(m, &beside(&out))
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenEpisodesArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub min_edges: Option<usize>,
    #[arg(long)]
    pub max_edges: Option<usize>,
    #[arg(long)]
    pub id_prefix: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn gen_episodes(a: GenEpisodesArgs) -> Result<(), Failure> {
    let world_path = required(a.world.clone(), "world")?;
    let out = required(a.out.clone(), "out")?;
    let seed = a.seed.unwrap_or(0);
    let mut spec = EpisodeSpec::default();
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(v) = a.min_edges {
        spec.min_edges = v;
    }
    if let Some(v) = a.max_edges {
        spec.max_edges = v;
    }
    if let Some(p) = a.id_prefix.clone() {
        spec.id_prefix = p;
    }
    let mut m = ManifestBuilder::new("gen-episodes", &a, Some(seed));
    let world = read_world(&world_path)?;
    m.input(&world_path);
    let episodes = generate_episodes(seed, &world, &spec, &TemplateGrammar::default()).map_err(invalid)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    save_episodes(&episodes, &out).map_err(runtime)?;
    m.output(&out);
    println!("wrote {} episodes to {}", episodes.len(), out.display());
    finish(m, &beside(&out))
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ValidateArgs {
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<PathBuf>,
}

pub fn validate(a: ValidateArgs) -> Result<(), Failure> {
    let world_path = required(a.world.clone(), "world")?;
    let world = read_world(&world_path)?;
    if !world.graph.is_connected() {
        return Err(invalid(anyhow!("world {} is not connected", world.graph.id)));
    }
    let mut summary = format!("world {}: {} nodes ok", world.graph.id, world.graph.len());
    if let Some(p) = &a.episodes {
        let episodes = read_episodes(p, &world)?;
        let table = world.graph.distance_table();
        for ep in &episodes {
            let start = world.graph.ix(&ep.path[0]).map_err(invalid)?;
            let goal = world.graph.ix(ep.goal()).map_err(invalid)?;
            if table.get(start, goal).is_none() {
                return Err(invalid(anyhow!("episode {}: goal unreachable", ep.id)));
            }
        }
        summary.push_str(&format!("; {} episodes ok", episodes.len()));
    }
    println!("{summary}");
    Ok(())
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PlanArgs {
    /// Plan file, TOML or JSON by extension.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn read_plan(path: &Path) -> Result<TrainPlan, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading plan {}", path.display()))
        .map_err(invalid)?;
    let mut plan: TrainPlan = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| invalid(anyhow!("plan {}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| invalid(anyhow!("plan {}: {e}", path.display())))?
    };
    plan.resolve(path.parent().unwrap_or(Path::new(".")));
    plan.validate().map_err(invalid)?;
    Ok(plan)
}

fn topology_mismatch(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut bad = Vec::new();
    for (key, x, y) in [
        ("hidden", a.hidden, b.hidden),
        ("layers_per_stack", a.layers_per_stack, b.layers_per_stack),
        ("heads", a.heads, b.heads),
        ("ff_size", a.ff_size, b.ff_size),
        ("max_path", a.max_path, b.max_path),
    ] {
        if x != y {
            bad.push(format!("config.{key}: plan has {y}, checkpoint has {x}"));
        }
    }
    bad
}

/// Builds the agent a plan starts from: its `init` checkpoint with the
/// plan's training settings, or a fresh agent over the training vocabulary.
pub fn plan_agent(plan: &TrainPlan, world: &World, train: &[Episode]) -> Result<Agent, Failure> {
    let metric: CaptionMetric = plan.metric.parse().map_err(invalid)?;
    let mut agent = match &plan.init {
        Some(p) => {
            let agent = Agent::load(p)
                .with_context(|| format!("loading {}", p.display()))
                .map_err(invalid)?;
            let bad = topology_mismatch(&agent.config, &plan.config);
            if !bad.is_empty() {
                return Err(invalid(anyhow!("plan does not match checkpoint: {}", bad.join("; "))));
            }
            agent
        }
        None => {
            let texts: Vec<&str> = train.iter().map(|e| e.instruction.as_str()).collect();
            let dims = FeatureDims {
                d_sem: world.d_sem,
                d_vis: world.d_vis,
            };
            Agent::new(plan.config.clone(), Vocabulary::build(&texts, 1), dims, metric, plan.seed).map_err(invalid)?
        }
    };
    if agent.dims.d_sem != world.d_sem || agent.dims.d_vis != world.d_vis {
        return Err(invalid(anyhow!("checkpoint feature widths do not match the world")));
    }
    agent.config = plan.config.clone();
    agent.optimizer.config = plan.config.adam();
    agent.seed = plan.seed;
    agent.metric = metric;
    Ok(agent)
}

pub fn run_plan(a: PlanArgs, command: &str) -> Result<(), Failure> {
    let plan_path = required(a.plan.clone(), "plan")?;
    let out = required(a.out.clone(), "out")?;
    let plan = read_plan(&plan_path)?;
    let expected = match command {
        "pretrain" => Phase::Pretrain,
        "train" => Phase::Finetune,
        _ => Phase::Dbt,
    };
    if plan.phase != expected {
        return Err(invalid(anyhow!(
            "phase: plan is for {}, command {command} needs {}",
            plan.phase.as_str(),
            expected.as_str()
        )));
    }
    let mut m = ManifestBuilder::new(command, &plan, Some(plan.seed));
    m.input(&plan_path);
    let world = read_world(&plan.data.world)?;
    m.input(&plan.data.world);
    let train = read_episodes(&plan.data.train, &world)?;
    m.input(&plan.data.train);
    let optional = |p: &Option<PathBuf>, role, m: &mut ManifestBuilder| -> Result<Option<Dataset>, Failure> {
        p.as_ref()
            .map(|p| {
                m.input(p);
                read_episodes(p, &world).map(|e| Dataset::new(role, e))
            })
            .transpose()
    };
    let val_seen = optional(&plan.data.val_seen, DatasetRole::ValSeen, &mut m)?;
    let val_unseen = optional(&plan.data.val_unseen, DatasetRole::ValUnseen, &mut m)?;
    let unlabeled = optional(&plan.data.unlabeled, DatasetRole::Unlabeled, &mut m)?;
    if let Some(init) = &plan.init {
        m.input(init);
    }
    let mut agent = plan_agent(&plan, &world, &train)?;
    let train = Dataset::new(DatasetRole::Train, train);
    fs::create_dir_all(&out).map_err(runtime)?;
    let graph = &world.graph;
    match plan.phase {
        Phase::Pretrain => {
            let logs = pretrain(&mut agent, graph, &train, plan.epochs, plan.path_masking).map_err(runtime)?;
            write_file(&out.join("epochs.csv"), epoch_csv(&logs))?;
            m.output(out.join("epochs.csv"));
        }
        Phase::Finetune => {
            let validation: Vec<&Dataset> = [val_seen.as_ref(), val_unseen.as_ref()].into_iter().flatten().collect();
            let logs = finetune(&mut agent, graph, &train, &validation, plan.epochs).map_err(runtime)?;
            write_file(&out.join("epochs.csv"), epoch_csv(&logs))?;
            m.output(out.join("epochs.csv"));
        }
        Phase::Dbt => {
            let mut state = DbtState::default();
            let mut logs = Vec::new();
            let data = DbtData {
                train: &train,
                validation: val_seen.as_ref().or(val_unseen.as_ref()),
                unlabeled: unlabeled.as_ref(),
            };
            for _ in 0..plan.dbt_rounds {
                let log = dbt_round(&mut agent, &mut state, graph, &data, plan.epochs).map_err(runtime)?;
                println!(
                    "round {}: stage1 pool {}/{}, stage2 kept {}/{}, speaker val {:?}, stage3 kept {}",
                    log.round,
                    log.stage1_pool,
                    log.stage1_rollouts,
                    log.stage2_kept,
                    log.stage2_generated,
                    log.speaker_val_score,
                    log.stage3_kept
                );
                logs.push(log);
            }
            let log_path = out.join("dbt_log.json");
            write_file(&log_path, serde_json::to_string_pretty(&logs).map_err(runtime)?)?;
            m.output(&log_path);
            let pool_path = out.join("generated.jsonl");
            let mut lines = String::new();
            for g in &state.generated_instructions {
                lines.push_str(&serde_json::to_string(g).map_err(runtime)?);
                lines.push('\n');
            }
            write_file(&pool_path, lines)?;
            m.output(&pool_path);
        }
    }
    let ck = out.join("checkpoint.bin");
    agent.save(&ck).map_err(runtime)?;
    m.output(&ck);
    println!("wrote {}", ck.display());
    finish(m, &out.join("manifest.json"))
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvaluateArgs {
    /// Checkpoint; not needed for the oracle and stop policies.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// greedy, sample, oracle or stop.
    #[arg(long)]
    pub policy: Option<String>,
    /// Directory for one SVG per episode.
    #[arg(long)]
    pub render_svg: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<Policy, Failure> {
    Ok(match s {
        "greedy" => Policy::Greedy,
        "sample" => Policy::Sample,
        "oracle" => Policy::Oracle,
        "stop" | "always-stop" => Policy::AlwaysStop,
        other => return Err(invalid(anyhow!("policy: unknown policy {other:?}"))),
    })
}

/// A placeholder agent for policies that never consult a model.
fn null_agent(world: &World) -> Result<Agent, Failure> {
    let config = ModelConfig {
        hidden: 4,
        heads: 1,
        ff_size: 4,
        layers_per_stack: 1,
        ..ModelConfig::default()
    };
    let dims = FeatureDims {
        d_sem: world.d_sem,
        d_vis: world.d_vis,
    };
    Agent::new(config, Vocabulary::build::<&str>(&[], 1), dims, CaptionMetric::Cider, 0).map_err(runtime)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let world_path = required(a.world.clone(), "world")?;
    let episodes_path = required(a.episodes.clone(), "episodes")?;
    let out = required(a.out.clone(), "out")?;
    let policy = parse_policy(a.policy.as_deref().unwrap_or("greedy"))?;
    let mut m = ManifestBuilder::new("evaluate", &a, None);
    let world = read_world(&world_path)?;
    m.input(&world_path);
    let episodes = read_episodes(&episodes_path, &world)?;
    m.input(&episodes_path);
    let agent = match (&a.model, policy) {
        (Some(p), _) => {
            m.input(p);
            Agent::load(p).with_context(|| format!("loading {}", p.display())).map_err(invalid)?
        }
        (None, Policy::Oracle | Policy::AlwaysStop) => null_agent(&world)?,
        (None, _) => return Err(invalid(anyhow!("missing required setting --model"))),
    };
    if agent.dims.d_sem != world.d_sem || agent.dims.d_vis != world.d_vis {
        return Err(invalid(anyhow!("model feature widths do not match the world")));
    }
    let outcomes = run_policy(&agent, &world.graph, &episodes, policy).map_err(runtime)?;
    let report = crossmap_core::metrics::nav_metrics(&world.graph, &outcomes).map_err(runtime)?;
    write_file(&out, report.to_json())?;
    m.output(&out);
    if let Some(dir) = &a.render_svg {
        fs::create_dir_all(dir).map_err(runtime)?;
        for (ep, o) in episodes.iter().zip(&outcomes) {
            let title = format!("{}: {}", ep.id, ep.instruction);
            let svg = PathRender {
                graph: &world.graph,
                title: &title,
                ground_truth: &ep.path,
                generated: &o.path,
            }
            .to_svg();
            let p = dir.join(format!("{}.svg", ep.id));
            write_file(&p, svg)?;
            m.output(p);
        }
    }
    println!(
        "episodes {} sr {:.4} ne {:.4} spl {:.4} osr {:.4}",
        report.count, report.sr, report.ne, report.spl, report.osr
    );
    finish(m, &beside(&out))
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SpeakArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<PathBuf>,
    /// JSON lines output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// bleu4, rouge_l or cider; defaults to the model's metric.
    #[arg(long)]
    pub metric: Option<String>,
}

#[derive(Serialize)]
struct SpokenRecord<'a> {
    episode_id: &'a str,
    reference: &'a str,
    text: String,
    score: f64,
    metric: &'a str,
}

pub fn speak(a: SpeakArgs) -> Result<(), Failure> {
    let model = required(a.model.clone(), "model")?;
    let world_path = required(a.world.clone(), "world")?;
    let episodes_path = required(a.episodes.clone(), "episodes")?;
    let out = required(a.out.clone(), "out")?;
    let mut m = ManifestBuilder::new("speak", &a, None);
    let world = read_world(&world_path)?;
    let episodes = read_episodes(&episodes_path, &world)?;
    let agent = Agent::load(&model).map_err(invalid)?;
    for p in [&world_path, &episodes_path, &model] {
        m.input(p);
    }
    let metric = match &a.metric {
        Some(s) => s.parse::<CaptionMetric>().map_err(invalid)?,
        None => agent.metric,
    };
    let mut refs: std::collections::HashMap<&[String], Vec<String>> = std::collections::HashMap::new();
    for ep in &episodes {
        refs.entry(ep.path.as_slice()).or_default().push(ep.instruction.clone());
    }
    let ref_sets: Vec<Vec<String>> = episodes.iter().map(|e| refs[e.path.as_slice()].clone()).collect();
    let corpus = CiderCorpus::new(&ref_sets);
    let mut lines = Vec::new();
    for ep in &episodes {
        let (text, _) = generate_for(&agent, &world.graph, ep).map_err(runtime)?;
        let score = score_generated(&text, &refs[ep.path.as_slice()], metric.id(), Some(&corpus)).map_err(runtime)?;
        let rec = SpokenRecord {
            episode_id: &ep.id,
            reference: &ep.instruction,
            text,
            score,
            metric: metric.id(),
        };
        lines.push(serde_json::to_string(&rec).map_err(runtime)?);
    }
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    write_file(&out, body)?;
    m.output(&out);
    println!("wrote {} instructions to {}", episodes.len(), out.display());
    finish(m, &beside(&out))
}

#[derive(Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    /// ops or model.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CheckRow<'a> {
    name: &'a str,
    relative_error: f64,
    tolerance: f64,
    passed: bool,
    excluded: usize,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let seed = a.seed.unwrap_or(0);
    let scope = a.scope.clone().unwrap_or_else(|| "ops".into());
    let results: Vec<GradCheckResult> = match scope.as_str() {
        "ops" => check_all_ops(seed, 1e-3, 1e-4).map_err(runtime)?,
        "model" => end_to_end_gradcheck(seed, 1e-3, 1e-3).map_err(runtime)?,
        other => return Err(invalid(anyhow!("scope: expected ops or model, got {other:?}"))),
    };
    let stdout = std::io::stdout();
    let mut w = stdout.lock();
    for r in &results {
        let _ = writeln!(
            w,
            "{:<8} {:<40} rel_err {:.3e} tol {:.0e} skipped {}",
            if r.passed { "pass" } else { "FAIL" },
            r.name,
            r.relative_error,
            r.tolerance,
            r.excluded
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if let Some(out) = &a.out {
        let rows: Vec<CheckRow> = results
            .iter()
            .map(|r| CheckRow {
                name: &r.name,
                relative_error: r.relative_error,
                tolerance: r.tolerance,
                passed: r.passed,
                excluded: r.excluded,
            })
            .collect();
        write_file(out, serde_json::to_string_pretty(&rows).map_err(runtime)?)?;
        let mut m = ManifestBuilder::new("gradcheck", &a, Some(seed));
        m.output(out);
        finish(m, &beside(out))?;
    }
    if failed > 0 {
        return Err(runtime(anyhow!("{failed} of {} gradient checks failed", results.len())));
    }
    let _ = writeln!(w, "all {} checks passed", results.len());
    Ok(())
}
