//! `fleetad` — clustering-based training pipeline for fleet anomaly
//! detection.
//!
//! Stages write their artifacts under `<out>/<run_id>/` where the run id is
//! derived from the resolved configuration and a content hash of the
//! dataset, so identical inputs always share a run directory. Exit codes:
//! 0 success, 1 runtime failure, 2 usage or stage-dependency error. Errors
//! print one machine-parsable line on stderr: `error: <Code>: <message>`.

mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fleetad_core::strategies::Strategy;

#[derive(Debug)]
pub enum CliError {
    ConfigInvalid(String),
    StageDependencyMissing(String),
    ArtifactCorrupt(String),
    Runtime(String),
}

impl CliError {
    fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    fn runtime_from(err: impl std::fmt::Display) -> Self {
        CliError::Runtime(err.to_string())
    }

    fn config(err: impl std::fmt::Display) -> Self {
        CliError::ConfigInvalid(err.to_string())
    }

    fn code(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid(_) => "ConfigInvalid",
            CliError::StageDependencyMissing(_) => "StageDependencyMissing",
            CliError::ArtifactCorrupt(_) => "ArtifactCorrupt",
            CliError::Runtime(_) => "Runtime",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::ConfigInvalid(m)
            | CliError::StageDependencyMissing(m)
            | CliError::ArtifactCorrupt(m)
            | CliError::Runtime(m) => m,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigInvalid(_) | CliError::StageDependencyMissing(_) => 2,
            CliError::ArtifactCorrupt(_) | CliError::Runtime(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "fleetad",
    version,
    about = "Similarity-clustered training of fleet anomaly-detection models"
)]
struct Cli {
    /// Pipeline configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Override the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the cluster count from the config.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Re-run a stage even if its artifacts are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize the dataset (devices, shapes, labels).
    Inspect,
    /// Pick the representative metric subset for clustering.
    SelectMetrics,
    /// Build the device similarity graph.
    Similarity,
    /// Partition devices into K clusters.
    Cluster,
    /// Derive the per-cluster transfer-learning schedule.
    Plan,
    /// Train models under one strategy (gm, mpd, cm, icptl).
    Train {
        #[arg(long)]
        strategy: String,
    },
    /// Score and evaluate every trained strategy on the test splits.
    Evaluate,
    /// Render the human-readable comparison report.
    Report,
    /// Evaluate cm or icptl across a range of cluster counts.
    SweepK {
        #[arg(long)]
        k_min: usize,
        #[arg(long)]
        k_max: usize,
        #[arg(long, default_value = "cm")]
        strategy: String,
    },
    /// Generate a synthetic fleet into the configured dataset root.
    Genfleet {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Apply a fleet change (added, removed, drifted) to the saved state.
    FleetEvent {
        #[arg(long)]
        event: String,
        #[arg(long)]
        device: String,
    },
}

fn parse_strategy(name: &str) -> Result<Strategy, CliError> {
    Strategy::parse(name).ok_or_else(|| {
        CliError::ConfigInvalid(format!(
            "unknown strategy `{name}` (expected gm, mpd, cm or icptl)"
        ))
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    // Standalone command: no dataset or run directory needed.
    if let Command::Genfleet { spec } = &cli.command {
        return pipeline::genfleet(cli.config.as_deref(), spec, cli.seed);
    }

    let mut ctx = pipeline::Context::open(
        cli.config.as_deref(),
        &cli.out,
        cli.seed,
        cli.k,
        cli.force,
    )?;
    match cli.command {
        Command::Inspect => ctx.inspect(),
        Command::SelectMetrics => ctx.select_metrics_stage(),
        Command::Similarity => ctx.similarity(),
        Command::Cluster => ctx.cluster(),
        Command::Plan => ctx.plan(),
        Command::Train { strategy } => ctx.train(parse_strategy(&strategy)?),
        Command::Evaluate => ctx.evaluate(),
        Command::Report => ctx.report(),
        Command::SweepK {
            k_min,
            k_max,
            strategy,
        } => ctx.sweep_k(k_min, k_max, parse_strategy(&strategy)?),
        Command::Genfleet { .. } => unreachable!("handled above"),
        Command::FleetEvent { event, device } => ctx.fleet_event(&event, &device),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}: {}", err.code(), err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
