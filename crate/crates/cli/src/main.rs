mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crd_core::CrdError;

use crate::config::Config;

#[derive(Parser, Debug)]
#[command(name = "crd", version, about = "Curate, translate and evaluate benchmarks released as KV caches")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
pub struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.d_model=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for every random component of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Suppress summaries on stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a toy model on a JSONL corpus or on generated lookup data.
    Train(commands::TrainArgs),
    /// Release a plaintext benchmark as a container plus datacard.
    Curate(commands::CurateArgs),
    /// Fit an alignment map between two models and translate a container.
    Translate(commands::TranslateArgs),
    /// Score a model on a released container.
    Evaluate(commands::EvaluateArgs),
    /// Paired plaintext vs released run on the anchor model.
    Verify(commands::VerifyArgs),
    /// Try to read prompts back out of a released container.
    Attack(commands::AttackArgs),
    /// Contamination experiment on a synthetic memorization task.
    Lab,
    /// Release size table for a model shape.
    Storage(commands::StorageArgs),
}

/// The equivalence gate rejected a release.
#[derive(Debug)]
pub struct GateFailure(pub String);

impl std::fmt::Display for GateFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "equivalence gate failed: {}", self.0)
    }
}

impl std::error::Error for GateFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<GateFailure>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CrdError>() {
            return if e.is_validation() { 1 } else { 3 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.global.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global()?;
    }
    let config = Config::load(cli.global.config.as_deref(), &cli.global.overrides, cli.global.seed)?;
    std::fs::create_dir_all(&cli.global.out)?;
    let g = &cli.global;
    match cli.command {
        Command::Train(a) => commands::train(&a, &config, g),
        Command::Curate(a) => commands::curate(&a, &config, g),
        Command::Translate(a) => commands::translate(&a, &config, g),
        Command::Evaluate(a) => commands::evaluate(&a, &config, g),
        Command::Verify(a) => commands::verify(&a, &config, g),
        Command::Attack(a) => commands::attack(&a, &config, g),
        Command::Lab => commands::lab(&config, g),
        Command::Storage(a) => commands::storage(&a, g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
