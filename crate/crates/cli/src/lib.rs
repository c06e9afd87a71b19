//! Command-line surface: dataset generation, full sequential runs with
//! ablation switches, checkpoint evaluation, condensation previews and
//! plot-ready reports.
//!
//! Exit codes: 0 success, 1 runtime or IO failure, 2 invalid arguments or
//! configuration.

pub mod commands;
pub mod config;
pub mod ppm;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const SEED_ENV: &str = "PR2R_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl From<pr2r_core::Error> for CliError {
    fn from(e: pr2r_core::Error) -> Self {
        match e {
            pr2r_core::Error::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pr2r", version, about = "Lifelong re-identification with condensed and style replay")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-domain benchmark.
    GenData(GenDataArgs),
    /// Train over the domain sequence and write metrics, checkpoints and memory.
    Run(RunArgs),
    /// Evaluate a checkpoint on dataset domains; prints CSV.
    Eval(EvalArgs),
    /// Train on one domain, condense its memory and export triptychs.
    CondensePreview(PreviewArgs),
    /// Turn a run's metrics.csv into tendency and average tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub domains: usize,
    /// Held-out domains with no training split.
    #[arg(long, default_value_t = 0)]
    pub unseen: usize,
    #[arg(long, default_value_t = 20)]
    pub ids: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Defaults to PR2R_SEED, then 7.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets lambda = 0.
    #[arg(long)]
    pub no_replay: bool,
    /// Sets gamma = 0.
    #[arg(long)]
    pub no_style: bool,
    /// Stores masked k-center picks without pixel updates.
    #[arg(long)]
    pub no_condense: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Restrict to these domain ids (repeatable); all domains by default.
    #[arg(long = "domain")]
    pub domains: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub domain: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Run(a) => commands::run(&a),
        Command::Eval(a) => commands::eval(&a, &mut std::io::stdout().lock()),
        Command::CondensePreview(a) => commands::condense_preview(&a),
        Command::Report(a) => report::report(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code, printing errors to standard error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
