//! `sbs`: run gate searches, fine-tunes, cost reports and the small-scale
//! comparison experiments from TOML configs.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs; nothing was run.
    Validation(String),
    Runtime(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser)]
#[command(
    name = "sbs",
    version,
    about = "Joint mixed-precision and pruning search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory. Defaults to `$SBS_OUT_DIR/<command>-<hash>` (or `runs/`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Searches run at once.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train, then search bit widths and pruned groups jointly.
    Search(RunArgs),
    /// Fine-tune a checkpoint at a fixed compression config.
    Finetune(RunArgs),
    /// BOPs and memory of a compression config.
    Report(ReportArgs),
    /// Single-path versus multi-path quantization on linear regression.
    Prop1(RunArgs),
    /// Rank joint and sequential search against exhaustive enumeration.
    Oracle(RunArgs),
    /// One search per lambda.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Search(a) => commands::search_cmd(a),
        Command::Finetune(a) => commands::finetune_cmd(a),
        Command::Report(a) => commands::report_cmd(a),
        Command::Prop1(a) => commands::prop1_cmd(a),
        Command::Oracle(a) => commands::oracle_cmd(a),
        Command::Sweep(a) => commands::sweep_cmd(a),
    };
    match res {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e @ CliError::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
