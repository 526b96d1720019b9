//! The `fusereader` command line: `gen-data`, `train`, `eval` and `answer`.
//!
//! Exit codes are 0 on success, 2 for usage and configuration errors and 3
//! for numeric failures during training.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "{m}"),
            Self::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<fusereader::Error> for CliError {
    fn from(e: fusereader::Error) -> Self {
        match e {
            fusereader::Error::NonFinite(m) => Self::Numeric(m),
            e => Self::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fusereader", version, about = "Dual-encoder question answering at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic factoid or cloze dataset as JSON.
    GenData(GenDataArgs),
    /// Train one preset and write a checkpoint, a JSONL log and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write a metric report.
    Eval(EvalArgs),
    /// Answer `question<TAB>context` lines from stdin with a factoid checkpoint.
    Answer(AnswerArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Factoid,
    Cloze,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: DataKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Size of the synthetic word pool.
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Cloze only: probability that the query is informative.
    #[arg(long, default_value_t = 0.9)]
    pub signal: f64,
    /// Cloze only.
    #[arg(long, default_value_t = 10)]
    pub num_entities: usize,
    /// Factoid only: fraction of answers that are not spans of the context.
    #[arg(long, default_value_t = 0.25)]
    pub non_extractable: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Masked-token pretraining steps per encoder; 0 skips pretraining.
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    /// JSON file supplying any of the above; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset to score; defaults to the run's test split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a one-row CSV in the results-table column order.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnswerArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Report malformed lines and keep going instead of failing.
    #[arg(long)]
    pub lenient: bool,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Answer(a) => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            commands::answer(&a, stdin.lock(), &mut stdout.lock(), &mut std::io::stderr())
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
