use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::operators::{
    crossover_k_point, environmental_selection, mutate_bit_flip, tournament_select,
};
use super::sorting::{crowding_distance, non_dominated_sort};
use super::{objectives_of, Candidate, GaParams, Nsga2Error, ObjectiveVector, Origin};
use crate::evaluator::{EvalError, Evaluator};
use crate::rng::{RngState, RunRng};
use crate::schedule::{CachingSchedule, ModelTopology, ScheduleError, FORMAT_VERSION};

/// Objectives keyed by schedule hash; identical bit vectors are scored once.
#[derive(Debug, Clone, Default)]
pub struct ObjectiveCache {
    entries: HashMap<String, ObjectiveVector>,
}

impl ObjectiveCache {
    pub fn get(&self, id: &str) -> Option<ObjectiveVector> {
        self.entries.get(id).copied()
    }

    pub fn insert(&mut self, id: String, objectives: ObjectiveVector) {
        self.entries.entry(id).or_insert(objectives);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fills in objectives for every candidate, sending each distinct
    /// unseen schedule to the evaluator exactly once.
    pub fn evaluate_pending<E: Evaluator + ?Sized>(
        &mut self,
        candidates: &mut [Candidate],
        evaluator: &E,
    ) -> Result<usize, Nsga2Error> {
        let mut pending: Vec<CachingSchedule> = Vec::new();
        let mut pending_ids: Vec<String> = Vec::new();
        for c in candidates.iter() {
            if c.objectives.is_none()
                && !self.entries.contains_key(&c.id)
                && !pending_ids.contains(&c.id)
            {
                pending_ids.push(c.id.clone());
                pending.push(c.schedule.clone());
            }
        }
        if !pending.is_empty() {
            let results = evaluator.evaluate(&pending)?;
            if results.len() != pending.len() {
                return Err(EvalError::CountMismatch {
                    expected: pending.len(),
                    actual: results.len(),
                }
                .into());
            }
            for (id, obj) in pending_ids.iter().zip(results) {
                if !obj.is_finite() {
                    return Err(EvalError::Candidate {
                        candidate: id.clone(),
                        message: format!("non-finite objectives {obj:?}"),
                    }
                    .into());
                }
                self.entries.insert(id.clone(), obj);
            }
        }
        for c in candidates.iter_mut() {
            match c.objectives {
                Some(obj) => self.insert(c.id.clone(), obj),
                None => c.objectives = self.get(&c.id),
            }
        }
        Ok(pending.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    /// Base64 of the packed little-endian bit vector.
    pub bits: String,
    pub cost_tmacs: f64,
    pub quality_loss: f64,
    pub origin: Origin,
}

impl CandidateRecord {
    pub fn from_candidate(c: &Candidate) -> Result<Self, Nsga2Error> {
        let o = c.objectives()?;
        Ok(Self {
            id: c.id.clone(),
            bits: c.schedule.to_base64(),
            cost_tmacs: o.cost_tmacs,
            quality_loss: o.quality_loss,
            origin: c.origin,
        })
    }

    pub fn objectives(&self) -> ObjectiveVector {
        ObjectiveVector::new(self.cost_tmacs, self.quality_loss)
    }

    pub fn to_candidate(&self, topology: &Arc<ModelTopology>) -> Result<Candidate, ScheduleError> {
        let schedule = CachingSchedule::from_base64(topology.clone(), &self.bits)?;
        let mut c = Candidate::new(schedule, self.origin).evaluated(self.objectives());
        if c.id != self.id {
            return Err(ScheduleError::Malformed(format!(
                "record id {} does not match its bits ({})",
                self.id, c.id
            )));
        }
        c.origin = self.origin;
        Ok(c)
    }
}

/// One generation: the evaluated offspring `Q_g`, the surviving population
/// `P_{g+1}`, and the engine RNG position after the generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub format_version: u32,
    pub generation: usize,
    pub offspring: Vec<CandidateRecord>,
    pub population: Vec<CandidateRecord>,
    pub mutations_applied: usize,
    pub random_ties: usize,
    pub evaluations: usize,
    pub rng: RngState,
    pub rng_digest: String,
}

impl GenerationRecord {
    pub fn candidates(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.offspring.iter().chain(&self.population)
    }
}

/// One NSGA-II generation. Returns the next population and the record.
pub fn evolve_generation<E: Evaluator + ?Sized>(
    population: &[Candidate],
    evaluator: &E,
    params: &GaParams,
    rng: &mut RunRng,
    cache: &mut ObjectiveCache,
    generation: usize,
) -> Result<(Vec<Candidate>, GenerationRecord), Nsga2Error> {
    let n = params.population_size;
    if population.len() != n {
        return Err(Nsga2Error::SizeMismatch {
            expected: n,
            actual: population.len(),
        });
    }
    let mut parents = population.to_vec();
    let mut evaluations = cache.evaluate_pending(&mut parents, evaluator)?;

    let objs = objectives_of(&parents)?;
    let partition = non_dominated_sort(&objs);
    let mut crowding = vec![0.0; n];
    for front in &partition.fronts {
        let members: Vec<ObjectiveVector> = front.iter().map(|&i| objs[i]).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&members)) {
            crowding[i] = d;
        }
    }

    let per_bit = 1.0 / parents[0].schedule.len() as f64;
    let mut offspring: Vec<Candidate> = Vec::with_capacity(n);
    let mut mutations_applied = 0;
    let mut random_ties = 0;
    while offspring.len() < n {
        let t = tournament_select(&partition, &crowding, rng)?;
        random_ties += t.random_ties;
        let (a, b) = t.parents;
        let (ca, cb, origin) =
            crossover_k_point(&parents[a].schedule, &parents[b].schedule, params, rng)?;
        for child in [ca, cb] {
            if offspring.len() == n {
                break;
            }
            let m = mutate_bit_flip(&child, params.mutation_probability, per_bit, rng);
            mutations_applied += m.applied as usize;
            let origin = if m.applied { Origin::Mutation } else { origin };
            offspring.push(Candidate::new(m.schedule, origin));
        }
    }
    evaluations += cache.evaluate_pending(&mut offspring, evaluator)?;

    let offspring_records = offspring
        .iter()
        .map(CandidateRecord::from_candidate)
        .collect::<Result<Vec<_>, _>>()?;
    let union: Vec<Candidate> = parents.into_iter().chain(offspring).collect();
    let next = environmental_selection(union, n)?;
    let record = GenerationRecord {
        format_version: FORMAT_VERSION,
        generation,
        offspring: offspring_records,
        population: next
            .iter()
            .map(CandidateRecord::from_candidate)
            .collect::<Result<Vec<_>, _>>()?,
        mutations_applied,
        random_ties,
        evaluations,
        rng: rng.state(params.rng_seed),
        rng_digest: rng.digest(),
    };
    Ok((next, record))
}

/// Resumable GA state.
#[derive(Debug, Clone)]
pub struct Engine {
    params: GaParams,
    population: Vec<Candidate>,
    rng: RunRng,
    cache: ObjectiveCache,
    generation: usize,
}

impl Engine {
    /// Evaluates the initial population and positions the RNG at its start.
    pub fn new<E: Evaluator + ?Sized>(
        initial: Vec<Candidate>,
        evaluator: &E,
        params: GaParams,
    ) -> Result<Self, Nsga2Error> {
        params.validate()?;
        if initial.len() != params.population_size {
            return Err(Nsga2Error::SizeMismatch {
                expected: params.population_size,
                actual: initial.len(),
            });
        }
        let mut population = initial;
        let mut cache = ObjectiveCache::default();
        cache.evaluate_pending(&mut population, evaluator)?;
        Ok(Self {
            rng: RunRng::from_seed(params.rng_seed),
            params,
            population,
            cache,
            generation: 0,
        })
    }

    /// Rebuilds the state after `records.len()` generations.
    pub fn resume(
        params: GaParams,
        topology: &Arc<ModelTopology>,
        initial: &[CandidateRecord],
        records: &[GenerationRecord],
    ) -> Result<Self, Nsga2Error> {
        params.validate()?;
        let to_candidates = |rs: &[CandidateRecord]| -> Result<Vec<Candidate>, Nsga2Error> {
            rs.iter().map(|r| Ok(r.to_candidate(topology)?)).collect()
        };
        let mut cache = ObjectiveCache::default();
        for r in initial
            .iter()
            .chain(records.iter().flat_map(|g| g.candidates()))
        {
            cache.insert(r.id.clone(), r.objectives());
        }
        let (population, rng) = match records.last() {
            Some(last) => (
                to_candidates(&last.population)?,
                RunRng::restore(&last.rng).map_err(Nsga2Error::RngState)?,
            ),
            None => (to_candidates(initial)?, RunRng::from_seed(params.rng_seed)),
        };
        if population.len() != params.population_size {
            return Err(Nsga2Error::SizeMismatch {
                expected: params.population_size,
                actual: population.len(),
            });
        }
        Ok(Self {
            params,
            population,
            rng,
            cache,
            generation: records.len(),
        })
    }

    pub fn step<E: Evaluator + ?Sized>(
        &mut self,
        evaluator: &E,
    ) -> Result<GenerationRecord, Nsga2Error> {
        let (next, record) = evolve_generation(
            &self.population,
            evaluator,
            &self.params,
            &mut self.rng,
            &mut self.cache,
            self.generation + 1,
        )?;
        self.population = next;
        self.generation += 1;
        Ok(record)
    }

    pub fn population(&self) -> &[Candidate] {
        &self.population
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn params(&self) -> &GaParams {
        &self.params
    }

    pub fn cache(&self) -> &ObjectiveCache {
        &self.cache
    }
}

#[derive(Debug, Clone)]
pub struct RunHistory {
    pub initial: Vec<CandidateRecord>,
    pub records: Vec<GenerationRecord>,
}

/// Runs `params.generations` generations from an initial population.
pub fn run<E: Evaluator + ?Sized>(
    initial_population: Vec<Candidate>,
    evaluator: &E,
    params: &GaParams,
) -> Result<RunHistory, Nsga2Error> {
    let mut engine = Engine::new(initial_population, evaluator, params.clone())?;
    let initial = engine
        .population()
        .iter()
        .map(CandidateRecord::from_candidate)
        .collect::<Result<Vec<_>, _>>()?;
    let mut records = Vec::with_capacity(params.generations);
    for _ in 0..params.generations {
        records.push(engine.step(evaluator)?);
    }
    Ok(RunHistory { initial, records })
}
