//! Evolutionary discovery of Pareto-optimal component caching schedules for
//! diffusion-transformer inference.
//!
//! The crate trades computational cost (MACs) against generation quality with
//! NSGA-II over binary caching tensors, and ships a small deterministic
//! surrogate transformer so the whole loop runs on a CPU.

pub mod cli;
pub mod costmodel;
pub mod digest;
pub mod evaluator;
pub mod exec;
pub mod nsga2;
pub mod orchestrator;
pub mod rng;
pub mod schedule;
pub mod seeding;
pub mod toydit;

pub use costmodel::{CostBreakdown, CostModel};
pub use evaluator::{EvalError, Evaluator};
pub use nsga2::{Candidate, GaParams, ObjectiveVector};
pub use schedule::{CachingSchedule, ModelTopology};
