//! `ctxfold`: retrofit, filter, summarize and simulate folded-context
//! trajectories.
//!
//! Exit codes: 0 when the batch completed (per-row failures are logged),
//! 1 for configuration or startup errors, 2 for I/O errors.

mod batch;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ctxfold_core::{PipelineConfig, StrategyKind};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(name = "ctxfold", version, about = "Context folding data pipeline and strategy simulator")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to the config value, then all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for generators, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Insert fold steps into base trajectories.
    Retrofit {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Split retrofit records into accepted.jsonl and rejected.jsonl.
    Filter {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Corpus statistics as a table on stdout and as JSON.
    Stats {
        #[arg(long)]
        input: Option<PathBuf>,
        /// JSON destination; printed after the table when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run a workload under each strategy and write survival and sweep CSVs.
    Simulate {
        /// Workload JSON.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated strategy names.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        /// Comma-separated round limits for the sweep.
        #[arg(long, value_delimiter = ',')]
        max_rounds: Option<Vec<usize>>,
    },
    /// Check trajectory invariants and fold replay for every row.
    Validate {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Write a synthetic base corpus (JSONL) or workload (JSON).
    Generate {
        #[arg(long, value_enum)]
        kind: GenerateKind,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Number of tasks.
        #[arg(long)]
        tasks: Option<usize>,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GenerateKind {
    Corpus,
    Workload,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub struct Ctx {
    pub cfg: PipelineConfig,
    /// `--seed`, when given.
    pub seed: Option<u64>,
    pub pool: rayon::ThreadPool,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(e) | Failure::Io(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| Failure::Config(e.into()))?,
        None => PipelineConfig::default(),
    };
    let jobs = cli.jobs.or(cfg.jobs);
    if jobs == Some(0) {
        return Err(Failure::Config(anyhow::anyhow!("--jobs must be positive")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Config(e.into()))?;
    let ctx = Ctx {
        seed: cli.seed,
        cfg,
        pool,
    };

    let input = |flag: Option<PathBuf>| {
        flag.or_else(|| ctx.cfg.io.input.clone())
            .ok_or_else(|| Failure::Config(anyhow::anyhow!("--input is required")))
    };
    let output = |flag: Option<PathBuf>| {
        flag.or_else(|| ctx.cfg.io.output.clone())
            .ok_or_else(|| Failure::Config(anyhow::anyhow!("--output is required")))
    };

    match cli.command {
        Command::Retrofit { input: i, output: o } => commands::retrofit(&ctx, &input(i)?, &output(o)?),
        Command::Filter { input: i, output: o } => commands::filter(&ctx, &input(i)?, &output(o)?),
        Command::Stats { input: i, output: o } => commands::stats(&input(i)?, o.as_deref()),
        Command::Simulate {
            input: i,
            output: o,
            strategies,
            max_rounds,
        } => {
            let strategies = match strategies {
                Some(names) => names
                    .iter()
                    .map(|n| n.parse::<StrategyKind>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Failure::Config(e.into()))?,
                None => ctx.cfg.runtime.strategies.clone(),
            };
            let max_rounds = max_rounds.unwrap_or_else(|| ctx.cfg.runtime.max_rounds.clone());
            if max_rounds.is_empty() || max_rounds.contains(&0) {
                return Err(Failure::Config(anyhow::anyhow!("--max-rounds must be positive")));
            }
            commands::simulate(&ctx, &input(i)?, &output(o)?, &strategies, &max_rounds)
        }
        Command::Validate { input: i } => commands::validate(&ctx, &input(i)?),
        Command::Generate { kind, output: o, tasks } => {
            commands::generate(&ctx, kind == GenerateKind::Corpus, &output(o)?, tasks)
        }
    }
}
