//! NSGA-II over binary caching schedules.

mod engine;
mod operators;
mod sorting;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::EvalError;
use crate::schedule::{CachingSchedule, ScheduleError};

pub use engine::{
    evolve_generation, run, CandidateRecord, Engine, GenerationRecord, ObjectiveCache, RunHistory,
};
pub use operators::{
    crossover_at, crossover_k_point, environmental_selection, environmental_selection_indices,
    mutate_bit_flip, tournament_select, MutationOutcome, TournamentOutcome,
};
pub use sorting::{crowding_distance, dominates, non_dominated_sort, FrontPartition};

#[derive(Debug, Error)]
pub enum Nsga2Error {
    #[error("candidate {id} has no objectives")]
    Unevaluated { id: String },
    #[error("population is empty")]
    EmptyPopulation,
    #[error("expected {expected} candidates, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("parents do not share a topology")]
    TopologyMismatch,
    #[error("invalid GA parameters: {0}")]
    InvalidParams(String),
    #[error("history record: {0}")]
    Record(#[from] ScheduleError),
    #[error("rng state: {0}")]
    RngState(String),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

/// Both axes are minimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub cost_tmacs: f64,
    pub quality_loss: f64,
}

impl ObjectiveVector {
    pub fn new(cost_tmacs: f64, quality_loss: f64) -> Self {
        Self {
            cost_tmacs,
            quality_loss,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cost_tmacs.is_finite() && self.quality_loss.is_finite()
    }

    pub fn get(&self, axis: usize) -> f64 {
        match axis {
            0 => self.cost_tmacs,
            _ => self.quality_loss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Seed,
    Crossover,
    Copy,
    Mutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub schedule: CachingSchedule,
    pub objectives: Option<ObjectiveVector>,
    pub origin: Origin,
    pub id: String,
}

impl Candidate {
    pub fn new(schedule: CachingSchedule, origin: Origin) -> Self {
        let id = schedule.hash();
        Self {
            schedule,
            objectives: None,
            origin,
            id,
        }
    }

    pub fn seed(schedule: CachingSchedule) -> Self {
        Self::new(schedule, Origin::Seed)
    }

    pub fn evaluated(mut self, objectives: ObjectiveVector) -> Self {
        self.objectives = Some(objectives);
        self
    }

    pub fn objectives(&self) -> Result<ObjectiveVector, Nsga2Error> {
        self.objectives.ok_or_else(|| Nsga2Error::Unevaluated {
            id: self.id.clone(),
        })
    }
}

/// Collects objectives, failing on the first unevaluated candidate.
pub fn objectives_of(population: &[Candidate]) -> Result<Vec<ObjectiveVector>, Nsga2Error> {
    population.iter().map(Candidate::objectives).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaParams {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_probability: f64,
    pub crossover_points: usize,
    pub mutation_probability: f64,
    pub rng_seed: u64,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population_size: 72,
            generations: 100,
            crossover_probability: 0.9,
            crossover_points: 4,
            mutation_probability: 0.05,
            rng_seed: 0,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<(), Nsga2Error> {
        if self.population_size == 0 || !self.population_size.is_multiple_of(2) {
            return Err(Nsga2Error::InvalidParams(format!(
                "population size must be a positive even integer, got {}",
                self.population_size
            )));
        }
        if self.crossover_points == 0 {
            return Err(Nsga2Error::InvalidParams(
                "crossover_points must be >= 1".into(),
            ));
        }
        for (name, p) in [
            ("crossover_probability", self.crossover_probability),
            ("mutation_probability", self.mutation_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Nsga2Error::InvalidParams(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        Ok(())
    }
}
