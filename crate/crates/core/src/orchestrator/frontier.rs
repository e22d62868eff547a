use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::nsga2::{CandidateRecord, RunHistory};
use crate::schedule::{CachingSchedule, ModelTopology, FORMAT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub schedule_hash: String,
    pub bits: String,
    pub cost_tmacs: f64,
    pub quality_loss: f64,
    pub cached_fraction: f64,
    /// First generation in which the schedule was evaluated (0 = initial).
    pub generation: usize,
}

/// Non-dominated points, cost strictly ascending and loss strictly
/// descending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub points: Vec<FrontierPoint>,
}

impl ParetoFrontier {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn schedule(
        &self,
        index: usize,
        topology: &Arc<ModelTopology>,
    ) -> Result<CachingSchedule, OrchestratorError> {
        Ok(CachingSchedule::from_base64(
            topology.clone(),
            &self.points[index].bits,
        )?)
    }
}

/// Keeps the non-dominated points. Duplicates by hash keep their first
/// occurrence; points with identical objectives keep the smallest hash.
pub fn pareto_filter(points: impl IntoIterator<Item = FrontierPoint>) -> ParetoFrontier {
    let mut seen = HashSet::new();
    let mut pts: Vec<FrontierPoint> = points
        .into_iter()
        .filter(|p| seen.insert(p.schedule_hash.clone()))
        .collect();
    pts.sort_by(|a, b| {
        a.cost_tmacs
            .total_cmp(&b.cost_tmacs)
            .then(a.quality_loss.total_cmp(&b.quality_loss))
            .then_with(|| a.schedule_hash.cmp(&b.schedule_hash))
    });
    let mut out: Vec<FrontierPoint> = Vec::new();
    for p in pts {
        if out
            .last()
            .is_none_or(|best| p.quality_loss < best.quality_loss)
        {
            out.push(p);
        }
    }
    ParetoFrontier { points: out }
}

fn point(
    r: &CandidateRecord,
    generation: usize,
    topology: &Arc<ModelTopology>,
) -> Result<FrontierPoint, OrchestratorError> {
    let s = CachingSchedule::from_base64(topology.clone(), &r.bits)?;
    Ok(FrontierPoint {
        schedule_hash: r.id.clone(),
        bits: r.bits.clone(),
        cost_tmacs: r.cost_tmacs,
        quality_loss: r.quality_loss,
        cached_fraction: s.cached_fraction(),
        generation,
    })
}

/// Every evaluated candidate in first-seen order, tagged with its generation.
fn all_evaluated(
    history: &RunHistory,
    topology: &Arc<ModelTopology>,
) -> Result<Vec<FrontierPoint>, OrchestratorError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let tagged = history.initial.iter().map(|r| (0, r)).chain(
        history
            .records
            .iter()
            .flat_map(|g| g.offspring.iter().map(move |r| (g.generation, r))),
    );
    for (g, r) in tagged {
        if seen.insert(r.id.as_str()) {
            out.push(point(r, g, topology)?);
        }
    }
    Ok(out)
}

/// Non-dominated set over all candidates ever evaluated in the run.
pub fn overall_frontier(
    history: &RunHistory,
    topology: &Arc<ModelTopology>,
) -> Result<ParetoFrontier, OrchestratorError> {
    if history.initial.is_empty() && history.records.is_empty() {
        return Err(OrchestratorError::EmptyHistory);
    }
    Ok(pareto_filter(all_evaluated(history, topology)?))
}

/// `F0` of the initial population and of each surviving population.
pub fn per_generation_frontiers(
    history: &RunHistory,
    topology: &Arc<ModelTopology>,
) -> Result<Vec<(usize, ParetoFrontier)>, OrchestratorError> {
    let all = all_evaluated(history, topology)?;
    let first_seen = |id: &str| {
        all.iter()
            .find(|p| p.schedule_hash == id)
            .map(|p| p.generation)
    };
    let mut out = Vec::new();
    if !history.initial.is_empty() {
        let pts = history
            .initial
            .iter()
            .map(|r| point(r, 0, topology))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((0, pareto_filter(pts)));
    }
    for rec in &history.records {
        let pts = rec
            .population
            .iter()
            .map(|r| point(r, first_seen(&r.id).unwrap_or(rec.generation), topology))
            .collect::<Result<Vec<_>, _>>()?;
        out.push((rec.generation, pareto_filter(pts)));
    }
    Ok(out)
}

/// Area dominated by the frontier inside the box bounded by `reference`
/// (cost, loss). Points outside the box contribute nothing.
pub fn hypervolume(frontier: &ParetoFrontier, reference: (f64, f64)) -> f64 {
    let (rc, rl) = reference;
    let mut area = 0.0;
    let mut ceiling = rl;
    for p in &frontier.points {
        if p.cost_tmacs >= rc {
            break;
        }
        if p.quality_loss < ceiling {
            area += (rc - p.cost_tmacs) * (ceiling - p.quality_loss);
            ceiling = p.quality_loss;
        }
    }
    area
}

/// Hypervolume of the overall frontier through generation `g`, for
/// `g = 0..=G`, against one fixed reference point.
pub fn hypervolume_progression(
    history: &RunHistory,
    topology: &Arc<ModelTopology>,
    reference: (f64, f64),
) -> Result<Vec<f64>, OrchestratorError> {
    let all = all_evaluated(history, topology)?;
    let last = history.records.last().map_or(0, |r| r.generation);
    Ok((0..=last)
        .map(|g| {
            let f = pareto_filter(all.iter().filter(|p| p.generation <= g).cloned());
            hypervolume(&f, reference)
        })
        .collect())
}

/// Lowest-loss member whose cost fits the budget.
pub fn select_by_budget(
    frontier: &ParetoFrontier,
    max_cost_tmacs: f64,
) -> Result<&FrontierPoint, OrchestratorError> {
    let cheapest = frontier
        .points
        .first()
        .ok_or(OrchestratorError::EmptyHistory)?;
    frontier
        .points
        .iter()
        .filter(|p| p.cost_tmacs <= max_cost_tmacs)
        .min_by(|a, b| {
            a.quality_loss
                .total_cmp(&b.quality_loss)
                .then(a.cost_tmacs.total_cmp(&b.cost_tmacs))
        })
        .ok_or(OrchestratorError::NoFeasible {
            budget: max_cost_tmacs,
            cheapest: cheapest.cost_tmacs,
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationFrontier {
    pub generation: usize,
    pub frontier: ParetoFrontier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierExport {
    pub format_version: u32,
    /// (baseline cost, maximum observed loss).
    pub reference_point: (f64, f64),
    pub generations: Vec<GenerationFrontier>,
    pub overall: ParetoFrontier,
    /// Overall-frontier hypervolume through each generation.
    pub hypervolume: Vec<f64>,
}

/// Builds the export for a history. `baseline_cost` is the full-recompute
/// cost, used as the cost coordinate of the reference point.
pub fn export_frontier(
    history: &RunHistory,
    topology: &Arc<ModelTopology>,
    baseline_cost: f64,
) -> Result<FrontierExport, OrchestratorError> {
    if history.initial.is_empty() && history.records.is_empty() {
        return Ok(FrontierExport {
            format_version: FORMAT_VERSION,
            reference_point: (baseline_cost, 0.0),
            generations: Vec::new(),
            overall: ParetoFrontier::default(),
            hypervolume: Vec::new(),
        });
    }
    let max_loss = all_evaluated(history, topology)?
        .iter()
        .map(|p| p.quality_loss)
        .fold(0.0, f64::max);
    let reference = (baseline_cost, max_loss);
    Ok(FrontierExport {
        format_version: FORMAT_VERSION,
        reference_point: reference,
        generations: per_generation_frontiers(history, topology)?
            .into_iter()
            .map(|(generation, frontier)| GenerationFrontier {
                generation,
                frontier,
            })
            .collect(),
        overall: overall_frontier(history, topology)?,
        hypervolume: hypervolume_progression(history, topology, reference)?,
    })
}

pub fn frontier_csv(export: &FrontierExport) -> String {
    let mut out = String::from("generation,schedule_hash,tmacs,quality_loss,cached_fraction\n");
    let rows = export
        .generations
        .iter()
        .flat_map(|g| {
            g.frontier
                .points
                .iter()
                .map(move |p| (g.generation.to_string(), p))
        })
        .chain(
            export
                .overall
                .points
                .iter()
                .map(|p| ("overall".to_string(), p)),
        );
    for (g, p) in rows {
        writeln!(
            out,
            "{g},{},{},{},{}",
            p.schedule_hash, p.cost_tmacs, p.quality_loss, p.cached_fraction
        )
        .unwrap();
    }
    out
}

pub fn frontier_json(export: &FrontierExport) -> String {
    serde_json::to_string_pretty(export).expect("export serializes")
}
