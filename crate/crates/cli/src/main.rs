mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use advmm::data::Domain;
use advmm::trainer::TrainMode;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "advmm", version, about = "Adversarial image-text embedding: generate, train, evaluate, search, export")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file with [synth], [model], [train] and [eval] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Bin,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adversarial,
    CategoryOnly,
    TripletBaseline,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adversarial => TrainMode::Adversarial,
            ModeArg::CategoryOnly => TrainMode::CategoryOnly,
            ModeArg::TripletBaseline => TrainMode::TripletBaseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Image,
    Text,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Image => Domain::Image,
            DomainArg::Text => Domain::Text,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train and test splits).
    Gen,
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_every: Option<u64>,
        /// Constant adaptation factor instead of the schedule.
        #[arg(long)]
        lambda: Option<f64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many updates without changing the schedule;
        /// `--resume` continues the run later.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Nearest neighbors of query features in a corpus.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding the corpus split.
        #[arg(long)]
        corpus: PathBuf,
        /// Query manifest (`.jsonl`); its blob is the sibling `.bin`.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Only rank corpus items of this domain.
        #[arg(long, value_enum)]
        to_domain: Option<DomainArg>,
    },
    /// Write embeddings of a dataset split.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "bin")]
        format: ExportFormat,
        /// Also write a 2-D principal-component projection.
        #[arg(long)]
        pca: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
