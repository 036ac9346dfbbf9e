//! `tvgan` command-line tool: data preparation, training, transformation,
//! evaluation and reporting.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tvgan::dataio::Protocol;
use tvgan::recog::{QuerySet, RankMode};
use tvgan::train::ModelKind;

use config::SplitMode;

#[derive(Debug, Parser)]
#[command(name = "tvgan", version, about = "Thermal-to-visible face translation and identification")]
pub struct Cli {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a subject-disjoint split file for a dataset manifest.
    PrepareData(PrepareArgs),
    /// Write the procedural toy dataset (PNG pairs plus manifest).
    SynthToy(SynthArgs),
    /// Train a model on the training subjects of a split.
    Train(TrainArgs),
    /// Translate thermal images with a checkpoint or the identity mapping.
    Transform(TransformArgs),
    /// Rank-k identification of translated test queries, one metrics file per split.
    Evaluate(EvaluateArgs),
    /// Average metrics files into a results table and CMC data; compose image grids.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<SplitMode>,
    /// Number of test subjects (random mode).
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Attribute whose carriers form the test set (attribute mode).
    #[arg(long)]
    pub attribute: Option<String>,
    /// Split file to write; defaults to `<out-dir>/split.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    #[arg(long, default_value_t = 10)]
    pub per_subject: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    /// Checkpoint of a generator or patch network (not needed for `plain`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Thermal images to translate.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    /// One checkpoint per split, in the same order.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long = "split")]
    pub splits: Vec<PathBuf>,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<Protocol>,
    /// `toy`, `file:<embeddings.jsonl>` or `cmd:<command>`.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Comma-separated rank levels.
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub rank_mode: Option<RankModeArg>,
    #[arg(long, value_enum)]
    pub query_set: Option<QuerySetArg>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics JSON files written by `evaluate`.
    #[arg(long = "metrics", num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
    pub format: TableFormat,
    /// One grid row as comma-separated image paths (repeatable).
    #[arg(long = "grid-row")]
    pub grid_rows: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TableFormat {
    Csv,
    Markdown,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum RankModeArg {
    PerImage,
    SubjectMin,
}

impl From<RankModeArg> for RankMode {
    fn from(a: RankModeArg) -> Self {
        match a {
            RankModeArg::PerImage => RankMode::PerImage,
            RankModeArg::SubjectMin => RankMode::SubjectMin,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum QuerySetArg {
    Test,
    Train,
}

impl From<QuerySetArg> for QuerySet {
    fn from(a: QuerySetArg) -> Self {
        match a {
            QuerySetArg::Test => QuerySet::Test,
            QuerySetArg::Train => QuerySet::Train,
        }
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: tvgan::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: tvgan::Error| e.to_string())
}

/// 0 success, 1 usage or input error, 2 internal or numerical failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<tvgan::Error>(), Some(tvgan::Error::NonFinite { .. })));
    if numerical {
        2
    } else {
        1
    }
}

/// Cause chain joined by ": ", skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
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
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
