mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viscos::checks::Suite;

/// Variational conditional sampling with invertible residual flows.
#[derive(Debug, Parser)]
#[command(name = "viscos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Progress on stderr and solver traces as CSV.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a flow (and an inference network for incomplete data).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a conditional posterior for each observation row.
    Condition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Draw completions from a fitted posterior.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        posterior: PathBuf,
        /// Number of completions (overrides `sample.n`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run diagnostic suites; exit 1 if any check fails.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "all")]
        suite: Suite,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Condition { common, checkpoint } => commands::condition(&common, &checkpoint),
        Command::Sample {
            common,
            checkpoint,
            posterior,
            n,
        } => commands::sample(&common, &checkpoint, &posterior, n),
        Command::Check {
            common,
            checkpoint,
            suite,
        } => commands::check(&common, &checkpoint, suite),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
