//! The boundary between the genetic engine and whatever scores schedules.

use std::sync::Arc;

use thiserror::Error;

use crate::costmodel::{CostError, CostModel};
use crate::nsga2::ObjectiveVector;
use crate::schedule::CachingSchedule;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cost model: {0}")]
    Cost(#[from] CostError),
    #[error("evaluation of candidate {candidate} failed: {message}")]
    Candidate { candidate: String, message: String },
    #[error("evaluator returned {actual} results for {expected} schedules")]
    CountMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Backend(Box<dyn std::error::Error + Send + Sync>),
}

/// Scores a batch of schedules. Results are positional: `out[i]` belongs to
/// `schedules[i]`.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, schedules: &[CachingSchedule]) -> Result<Vec<ObjectiveVector>, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for Arc<E> {
    fn evaluate(&self, schedules: &[CachingSchedule]) -> Result<Vec<ObjectiveVector>, EvalError> {
        (**self).evaluate(schedules)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, schedules: &[CachingSchedule]) -> Result<Vec<ObjectiveVector>, EvalError> {
        (**self).evaluate(schedules)
    }
}

/// Cost from the MAC model, constant quality loss of zero.
#[derive(Debug, Clone)]
pub struct CostOnlyEvaluator {
    model: CostModel,
}

impl CostOnlyEvaluator {
    pub fn new(model: CostModel) -> Self {
        Self { model }
    }
}

impl Evaluator for CostOnlyEvaluator {
    fn evaluate(&self, schedules: &[CachingSchedule]) -> Result<Vec<ObjectiveVector>, EvalError> {
        schedules
            .iter()
            .map(|s| Ok(ObjectiveVector::new(self.model.total_tmacs(s)?, 0.0)))
            .collect()
    }
}
