//! `textgeo`: the text geocoding pipeline as one command.
//!
//! Machine-readable output goes to stdout, diagnostics and the parameter
//! record of each run to stderr. Exit codes: 0 success, 1 usage, 2 data
//! error, 3 internal error.

mod commands;
mod io;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use textgeo::dataset::RecordFormat;

#[derive(Debug, Parser)]
#[command(name = "textgeo", version, about = "Text geocoding over adaptive cube-sphere cells")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an adaptive partition from record locations
    Partition(PartitionArgs),
    /// Attach leaf labels to records
    Label(LabelArgs),
    /// Split records into train and test sets by id hash
    Split(SplitArgs),
    /// Train the token-count baseline scorer
    TrainBaseline(TrainArgs),
    /// Decode texts into ranked cell labels
    Predict(PredictArgs),
    /// Score predictions against gold records
    Evaluate(EvaluateArgs),
    /// Run the HTTP service
    Serve(ServeArgs),
    /// Summarize a partition, a label or the level table
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Records file (TSV or JSONL)
    #[arg(long)]
    input: PathBuf,
    /// Record format; guessed from the extension when omitted
    #[arg(long)]
    format: Option<RecordFormat>,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = textgeo::partition::DEFAULT_MAX_CELL_SAMPLES)]
    max_cell_samples: u64,
    #[arg(long, default_value_t = textgeo::cellgeo::DEFAULT_MAX_LEVEL)]
    max_level: u8,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct LabelArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    partition: PathBuf,
    /// Defaults to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = textgeo::dataset::SplitSpec::DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    partition: PathBuf,
    /// Additive smoothing
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Baseline model or external scores file
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    /// A single query
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    text: Option<String>,
    /// Records to decode
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    format: Option<RecordFormat>,
    #[arg(long, default_value_t = textgeo::decode::DEFAULT_BEAM_WIDTH)]
    beam: usize,
    #[arg(long, default_value_t = textgeo::decode::DEFAULT_TOP_K)]
    top_k: usize,
    /// Defaults to stdout
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predictions JSONL
    #[arg(long)]
    pred: PathBuf,
    /// Gold records (TSV or JSONL)
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    format: Option<RecordFormat>,
    /// Labels gold records that carry no label column
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Comma-separated allowed origins; `*` allows any
    #[arg(long, value_delimiter = ',')]
    cors_origins: Vec<String>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("what").required(true).multiple(true).args(["partition", "label", "levels"]))]
struct InspectArgs {
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Describe one label (needs --partition for leaf status)
    #[arg(long)]
    label: Option<String>,
    /// Print the uniform level table up to this level
    #[arg(long)]
    levels: Option<u8>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn data(e: impl fmt::Display) -> Self {
        Self::Data(e.to_string())
    }

    pub fn internal(e: impl fmt::Display) -> Self {
        Self::Internal(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Partition(a) => commands::partition(a),
        Command::Label(a) => commands::label(a),
        Command::Split(a) => commands::split(a),
        Command::TrainBaseline(a) => commands::train_baseline(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Serve(a) => commands::serve(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("textgeo: {e}");
            ExitCode::from(e.code())
        }
    }
}
