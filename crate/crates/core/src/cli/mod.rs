//! The `ecad` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime or
//! protocol failure.

mod commands;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::costmodel::CostError;
use crate::evaluator::EvalError;
use crate::nsga2::Nsga2Error;
use crate::orchestrator::OrchestratorError;
use crate::schedule::ScheduleError;
use crate::seeding::SeedingError;
use crate::toydit::ToyError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Validation(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Io(_) => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<SeedingError> for CliError {
    fn from(e: SeedingError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<ToyError> for CliError {
    fn from(e: ToyError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<Nsga2Error> for CliError {
    fn from(e: Nsga2Error) -> Self {
        match e {
            Nsga2Error::InvalidParams(_) | Nsga2Error::SizeMismatch { .. } => {
                Self::Validation(e.to_string())
            }
            Nsga2Error::Record(_) | Nsga2Error::RngState(_) => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Schedule(e) => e.into(),
            OrchestratorError::Engine(e) => e.into(),
            OrchestratorError::Eval(_) | OrchestratorError::Io { .. } => {
                Self::Runtime(e.to_string())
            }
            _ => Self::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ecad",
    version,
    about = "Evolutionary search for Pareto-optimal caching schedules in diffusion transformers"
)]
pub struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Describe a built-in or file topology.
    Topology(TopologyArgs),
    /// Build an initial population file from a strategy mix.
    Seed(SeedArgs),
    /// Write one heuristic or random schedule.
    Schedule(ScheduleArgs),
    /// Run or resume an optimization.
    Run(Box<run::RunArgs>),
    /// Export per-generation and overall frontiers of a run.
    Frontier(FrontierArgs),
    /// Pick the best frontier schedule within a compute budget.
    Select(SelectArgs),
    /// Rescale a schedule to twice or half its step count.
    Rescale(RescaleArgs),
    /// Compute the MAC cost of a schedule.
    Cost(CostArgs),
    /// Normalize another implementation's cached latency to our baseline.
    NormalizeLatency(NormalizeArgs),
    /// Built-in protocol worker scoring quality = -cost (testing aid).
    #[command(hide = true)]
    MockWorker(MockWorkerArgs),
}

#[derive(Debug, Args)]
pub struct TopologyArgs {
    /// Built-in name or path to a topology JSON file.
    #[arg(default_value = "pixart-like")]
    pub topology: String,
    /// List built-in topology names instead.
    #[arg(long)]
    pub list: bool,
    /// Print the full topology document instead of a summary.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SeedArgs {
    /// Built-in name or path to a topology JSON file.
    #[arg(long, default_value = "pixart-like")]
    pub topology: String,
    /// Strategy mix JSON; defaults to the built-in mix for the topology.
    #[arg(long)]
    pub strategy_mix: Option<PathBuf>,
    /// Number of candidates.
    #[arg(long, default_value_t = 72)]
    pub population: usize,
    /// Seed for the random strategies.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output population file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Built-in name or path to a topology JSON file.
    #[arg(long, default_value = "pixart-like")]
    pub topology: String,
    /// One of: full, cached, fora:N, tgate:M:K, component:KIND:S:B,
    /// cross-self:N, uniform, random:P.
    #[arg(long, default_value = "full")]
    pub strategy: String,
    /// Seed for the random strategies.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output schedule file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FrontierArgs {
    /// Run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Write the frontier table as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the frontier export as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["run", "frontier"])))]
pub struct SelectArgs {
    /// Run directory whose overall frontier is searched.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Frontier JSON written by `frontier --json`.
    #[arg(long)]
    pub frontier: Option<PathBuf>,
    /// Topology for --frontier (built-in name or path).
    #[arg(long)]
    pub topology: Option<String>,
    /// Maximum cost in TMACs.
    #[arg(long)]
    pub budget_tmacs: f64,
    /// Output schedule file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RescaleArgs {
    /// Input schedule file.
    pub input: PathBuf,
    /// Target step count (exactly double or half).
    #[arg(long)]
    pub to_steps: usize,
    /// Topology the schedule belongs to; defaults to the name in the file.
    #[arg(long)]
    pub topology: Option<String>,
    /// Output schedule file (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Schedule file to cost.
    #[arg(long)]
    pub schedule: PathBuf,
    /// Topology the schedule belongs to; defaults to the name in the file.
    #[arg(long)]
    pub topology: Option<String>,
}

#[derive(Debug, Args)]
pub struct NormalizeArgs {
    /// The other implementation's cached latency in ms.
    #[arg(long)]
    pub cached_ms: f64,
    /// The other implementation's unaccelerated latency in ms.
    #[arg(long)]
    pub unaccelerated_ms: f64,
    /// Our unaccelerated latency in ms.
    #[arg(long)]
    pub ours_ms: f64,
}

#[derive(Debug, Args)]
pub struct MockWorkerArgs {
    /// Topology whose hash requests must carry.
    #[arg(long, default_value = "toy")]
    pub topology: String,
    /// Protocol version announced in the handshake.
    #[arg(long, default_value_t = crate::orchestrator::protocol::PROTOCOL_VERSION)]
    pub protocol_version: u32,
    /// Exit after answering this many requests.
    #[arg(long)]
    pub die_after: Option<usize>,
    /// Stop answering after this many requests.
    #[arg(long)]
    pub hang_after: Option<usize>,
    /// Send a malformed line after this many requests.
    #[arg(long)]
    pub malformed_after: Option<usize>,
    /// Send every response twice.
    #[arg(long)]
    pub duplicate: bool,
    /// Fire each fault only if this marker file does not exist yet.
    #[arg(long)]
    pub once_marker: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecArg {
    Sequential,
    Parallel,
}

/// Parses `args` and runs the subcommand. Returns the exit code.
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    run_with(std::env::args_os())
}
