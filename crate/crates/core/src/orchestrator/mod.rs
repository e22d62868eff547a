//! Run lifecycle: manifests, append-only history, resume, frontiers, and the
//! external evaluator process pool.

mod frontier;
mod manifest;
pub mod mock;
mod pool;
pub mod protocol;
mod runner;
mod store;

use thiserror::Error;

use crate::evaluator::EvalError;
use crate::nsga2::Nsga2Error;
use crate::schedule::ScheduleError;
use crate::seeding::SeedingError;

pub use frontier::{
    export_frontier, frontier_csv, frontier_json, hypervolume, hypervolume_progression,
    overall_frontier, pareto_filter, per_generation_frontiers, select_by_budget, FrontierExport,
    FrontierPoint, ParetoFrontier,
};
pub use manifest::{EvaluatorDescriptor, RunManifest, SeedingDescriptor, TopologyRef};
pub use pool::{ExternalEvaluator, PoolConfig, PoolError, WorkerPool};
pub use runner::{execute, RunOutcome};
pub use store::{population_from_json, population_to_json, RunStore};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("run history is empty")]
    EmptyHistory,
    #[error("no frontier member fits a budget of {budget} TMACs (cheapest costs {cheapest})")]
    NoFeasible { budget: f64, cheapest: f64 },
    #[error("manifest mismatch, cannot resume: {}", .0.join("; "))]
    ManifestMismatch(Vec<String>),
    #[error("corrupt {file}: {message}")]
    Corrupt { file: String, message: String },
    #[error("run directory {0} already holds a run; pass it to --resume instead")]
    RunExists(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Seeding(#[from] SeedingError),
    #[error(transparent)]
    Engine(#[from] Nsga2Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl OrchestratorError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
