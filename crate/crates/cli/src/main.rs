mod commands;
mod manifest;
mod settings;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Failure;

#[derive(Parser)]
#[command(name = "crossmap", version, about = "Instruction-following navigation: worlds, training, evaluation and speaking")]
struct Cli {
    /// TOML file with one table per subcommand, e.g. `[gen-world]`.
    /// Command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world.
    GenWorld(commands::GenWorldArgs),
    /// Generate template episodes on a world.
    GenEpisodes(commands::GenEpisodesArgs),
    /// Check a world and optionally episodes against it.
    Validate(commands::ValidateArgs),
    /// Joint pretraining of navigator and speaker.
    Pretrain(commands::PlanArgs),
    /// Finetuning with sampled exploration.
    Train(commands::PlanArgs),
    /// Double back-translation rounds.
    Dbt(commands::PlanArgs),
    /// Score a policy on episodes.
    Evaluate(commands::EvaluateArgs),
    /// Generate instructions for episode paths.
    Speak(commands::SpeakArgs),
    /// Finite-difference gradient checks.
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = settings::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::GenWorld(a) => commands::gen_world(settings::merge(a, &cfg, "gen-world")?),
        Command::GenEpisodes(a) => commands::gen_episodes(settings::merge(a, &cfg, "gen-episodes")?),
        Command::Validate(a) => commands::validate(settings::merge(a, &cfg, "validate")?),
        Command::Pretrain(a) => commands::run_plan(settings::merge(a, &cfg, "pretrain")?, "pretrain"),
        Command::Train(a) => commands::run_plan(settings::merge(a, &cfg, "train")?, "train"),
        Command::Dbt(a) => commands::run_plan(settings::merge(a, &cfg, "dbt")?, "dbt"),
        Command::Evaluate(a) => commands::evaluate(settings::merge(a, &cfg, "evaluate")?),
        Command::Speak(a) => commands::speak(settings::merge(a, &cfg, "speak")?),
        Command::Gradcheck(a) => commands::gradcheck(settings::merge(a, &cfg, "gradcheck")?),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
