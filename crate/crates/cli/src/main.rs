mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iterag_core::Error;

use crate::config::Overrides;

/// Iterative reasoning/retrieval pipeline: indexing, trajectory generation,
/// filtering, SFT export, RL sampling, reward scoring, advantages and
/// evaluation.
#[derive(Debug, Parser)]
#[command(name = "iterag", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config (TOML). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_iterations: Option<usize>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    #[arg(long, global = true, action = clap::ArgAction::Set)]
    pub strict: Option<bool>,
    /// Worker threads (and default per-endpoint request bound).
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Write every model and retrieval request as JSONL.
    #[arg(long, global = true)]
    pub request_log: Option<PathBuf>,
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            max_iterations: self.max_iterations,
            top_k: self.top_k,
            strict: self.strict,
            concurrency: self.concurrency,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a BM25 index file from a corpus JSONL ({id, title, text}).
    #[command(subcommand)]
    Index(IndexCmd),
    #[command(subcommand)]
    Coldstart(ColdstartCmd),
    #[command(subcommand)]
    Sft(SftCmd),
    #[command(subcommand)]
    Rl(RlCmd),
    /// Per-step rewards for finished trajectories.
    Score(ScoreArgs),
    /// TD errors and GAE advantages from reward JSONL.
    Advantage(AdvantageArgs),
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ColdstartCmd {
    /// Generate trajectories for QA items.
    Generate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        /// Comma-separated; sample i uses entry i mod len.
        #[arg(long, value_delimiter = ',')]
        temperatures: Option<Vec<f64>>,
    },
    /// Keep only answered trajectories with correct answers.
    Filter {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        kept: PathBuf,
        #[arg(long)]
        discarded: PathBuf,
        /// Trajectories whose judge call failed.
        #[arg(long)]
        retry: Option<PathBuf>,
        /// Trajectories aborted during generation.
        #[arg(long)]
        aborted: Option<PathBuf>,
        /// Rejected: filtering is cold-start only; use `rl sample`.
        #[arg(long)]
        keep_all: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum SftCmd {
    Export {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum RlCmd {
    /// Sample trajectories without filtering.
    Sample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// QA items used for cold start; overlap is rejected.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdvantageArgs {
    #[arg(long)]
    pub rewards: PathBuf,
    /// JSONL of {trajectory_id, values}; zeros when omitted.
    #[arg(long)]
    pub values: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lam: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Metric report (JSON).
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub per_item: Option<PathBuf>,
    #[arg(long)]
    pub trajectories: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Iterative loop.
    Run(EvalArgs),
    /// Single retrieval with the question, then one generation.
    Baseline(EvalArgs),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 2,
        e if e.is_transport() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
