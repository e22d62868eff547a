use std::time::Instant;

use super::{OrchestratorError, RunStore};
use crate::evaluator::Evaluator;
use crate::nsga2::{Candidate, CandidateRecord, Engine, GaParams, GenerationRecord, RunHistory};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: RunHistory,
    /// Generations already on disk when this call started.
    pub resumed_from: usize,
}

/// Drives a run directory to `params.generations`, evaluating the seed
/// population first if needed and appending each generation as it lands.
/// A failure leaves every completed generation on disk, so the same call
/// can pick up again later.
pub fn execute<E: Evaluator + ?Sized>(
    store: &RunStore,
    params: &GaParams,
    evaluator: &E,
    mut on_generation: impl FnMut(&GenerationRecord),
) -> Result<RunOutcome, OrchestratorError> {
    let topology = store.topology()?;
    let mut records = store.history()?;
    let resumed_from = records.len();
    let (mut engine, initial) = match store.initial()? {
        Some(initial) => (
            Engine::resume(params.clone(), &topology, &initial, &records)?,
            initial,
        ),
        None => {
            if !records.is_empty() {
                return Err(OrchestratorError::Corrupt {
                    file: "initial.json".into(),
                    message: "missing while history.jsonl has generations".into(),
                });
            }
            let seeds = store.seeds(&topology)?;
            let engine = Engine::new(
                seeds.into_iter().map(Candidate::seed).collect(),
                evaluator,
                params.clone(),
            )?;
            let initial = engine
                .population()
                .iter()
                .map(CandidateRecord::from_candidate)
                .collect::<Result<Vec<_>, _>>()?;
            store.write_initial(&initial)?;
            (engine, initial)
        }
    };
    while engine.generation() < params.generations {
        let started = Instant::now();
        let record = engine.step(evaluator)?;
        store.append(&record, started.elapsed())?;
        on_generation(&record);
        records.push(record);
    }
    Ok(RunOutcome {
        history: RunHistory { initial, records },
        resumed_from,
    })
}
