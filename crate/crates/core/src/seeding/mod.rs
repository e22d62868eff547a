//! Initial populations: heuristic schedule families and random initializers.

pub mod diophantine;

use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nsga2::{crossover_k_point, mutate_bit_flip, Candidate, GaParams};
use crate::schedule::{gmacs_to_mmacs, CachingSchedule, ModelTopology, ScheduleError};

pub use diophantine::{extended_gcd, gcd, solve_two_var_diophantine, TwoVarSolutions};

pub const SELF_ATTENTION: &str = "self_attention";
pub const CROSS_ATTENTION: &str = "cross_attention";
pub const FEEDFORWARD: &str = "feedforward";

#[derive(Debug, Error)]
pub enum SeedingError {
    #[error("invalid {strategy} parameters: {message}")]
    InvalidParams {
        strategy: &'static str,
        message: String,
    },
    #[error("topology `{topology}` has no `{component}` component")]
    MissingComponent { topology: String, component: String },
    #[error("strategy mix is empty")]
    EmptyMix,
    #[error("strategy mix: {0}")]
    Mix(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn invalid(strategy: &'static str, message: impl Into<String>) -> SeedingError {
    SeedingError::InvalidParams {
        strategy,
        message: message.into(),
    }
}

/// `floor(i * span / count)` for `i` in `0..count`.
fn evenly_spaced(span: usize, count: usize) -> Vec<usize> {
    (0..count).map(|i| i * span / count).collect()
}

/// `(group, block, component)` coordinates of every block carrying `name`.
fn component_sites(topology: &ModelTopology, name: &str) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (g, group) in topology.groups().iter().enumerate() {
        if let Some(c) = group.components.iter().position(|c| c.name == name) {
            out.extend((0..group.blocks).map(|b| (g, b, c)));
        }
    }
    out
}

fn require_sites(
    topology: &ModelTopology,
    name: &str,
) -> Result<Vec<(usize, usize, usize)>, SeedingError> {
    let sites = component_sites(topology, name);
    if sites.is_empty() {
        return Err(SeedingError::MissingComponent {
            topology: topology.name().to_string(),
            component: name.to_string(),
        });
    }
    Ok(sites)
}

fn set_sites(
    topology: &ModelTopology,
    bits: &mut [bool],
    step: usize,
    sites: &[(usize, usize, usize)],
    value: bool,
) {
    for &(g, b, c) in sites {
        bits[topology.cell_index(step, g, b, c).unwrap()] = value;
    }
}

/// Recomputes everything on multiples of `interval`, caches the rest.
pub fn fora_schedule(
    topology: &Arc<ModelTopology>,
    interval: usize,
) -> Result<CachingSchedule, SeedingError> {
    if interval == 0 {
        return Err(invalid("fora", "interval must be >= 1"));
    }
    let cps = topology.cells_per_step();
    let bits = (0..topology.total_cells())
        .map(|i| (i / cps).is_multiple_of(interval))
        .collect();
    Ok(CachingSchedule::from_bits(topology.clone(), bits)?)
}

/// Two warm-up steps, then self-attention on the absolute `k` grid until the
/// gate step `m`; from `m` on cross-attention is frozen. `m == steps` means
/// the gate never fires.
pub fn tgate_schedule(
    topology: &Arc<ModelTopology>,
    m: usize,
    k: usize,
) -> Result<CachingSchedule, SeedingError> {
    let steps = topology.steps();
    if m < 2 || m > steps {
        return Err(invalid(
            "tgate",
            format!("gate step must lie in [2, {steps}], got {m}"),
        ));
    }
    if k == 0 {
        return Err(invalid("tgate", "interval must be >= 1"));
    }
    let sa = require_sites(topology, SELF_ATTENTION)?;
    let ca = require_sites(topology, CROSS_ATTENTION)?;
    let mut bits = vec![true; topology.total_cells()];
    for t in 2..steps {
        if t < m {
            if t % k != 0 {
                set_sites(topology, &mut bits, t, &sa, false);
            }
        } else {
            set_sites(topology, &mut bits, t, &ca, false);
        }
    }
    Ok(CachingSchedule::from_bits(topology.clone(), bits)?)
}

/// Caches `component` in `b` evenly spaced blocks at `s` evenly spaced steps
/// of `[1, steps)`.
pub fn component_only_schedule(
    topology: &Arc<ModelTopology>,
    component: &str,
    s: usize,
    b: usize,
) -> Result<CachingSchedule, SeedingError> {
    let steps = topology.steps();
    let sites = require_sites(topology, component)?;
    if s == 0 || s >= steps {
        return Err(invalid(
            "component_only",
            format!("step count must lie in [1, {}], got {s}", steps - 1),
        ));
    }
    if b == 0 || b > sites.len() {
        return Err(invalid(
            "component_only",
            format!("block count must lie in [1, {}], got {b}", sites.len()),
        ));
    }
    let chosen: Vec<_> = evenly_spaced(sites.len(), b)
        .into_iter()
        .map(|i| sites[i])
        .collect();
    let mut bits = vec![true; topology.total_cells()];
    for off in evenly_spaced(steps - 1, s) {
        set_sites(topology, &mut bits, 1 + off, &chosen, false);
    }
    Ok(CachingSchedule::from_bits(topology.clone(), bits)?)
}

/// Caches both attentions in every block on each `interval`-th step after 0.
pub fn cross_self_all_blocks_schedule(
    topology: &Arc<ModelTopology>,
    interval: usize,
) -> Result<CachingSchedule, SeedingError> {
    if interval == 0 {
        return Err(invalid("cross_self_all_blocks", "interval must be >= 1"));
    }
    let mut sites = require_sites(topology, SELF_ATTENTION)?;
    sites.extend(require_sites(topology, CROSS_ATTENTION)?);
    let mut bits = vec![true; topology.total_cells()];
    for t in (interval..topology.steps()).step_by(interval) {
        set_sites(topology, &mut bits, t, &sites, false);
    }
    Ok(CachingSchedule::from_bits(topology.clone(), bits)?)
}

/// Each bit after step 0 is cached independently with probability `p`.
pub fn true_random_schedule(
    topology: &Arc<ModelTopology>,
    p: f64,
    rng: &mut impl Rng,
) -> Result<CachingSchedule, SeedingError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(
            "true_random",
            format!("p must lie in [0, 1], got {p}"),
        ));
    }
    let cps = topology.cells_per_step();
    let bits = (0..topology.total_cells())
        .map(|i| i < cps || !rng.gen_bool(p))
        .collect();
    Ok(CachingSchedule::from_bits(topology.clone(), bits)?)
}

/// One (group, component) pair as a variable of the budget equation.
#[derive(Debug, Clone)]
struct Kind {
    weight: u64,
    /// Step-0 cells, always recomputed.
    floor: u64,
    cap: u64,
    /// Cell indices in steps >= 1.
    free_cells: Vec<usize>,
}

fn sampler_kinds(topology: &ModelTopology) -> Vec<Kind> {
    let mut kinds = Vec::new();
    for (g, group) in topology.groups().iter().enumerate() {
        for (c, comp) in group.components.iter().enumerate() {
            let free_cells = (1..topology.steps())
                .flat_map(|t| (0..group.blocks).map(move |b| (t, b)))
                .map(|(t, b)| topology.cell_index(t, g, b, c).unwrap())
                .collect();
            kinds.push(Kind {
                weight: gmacs_to_mmacs(comp.mac_weight),
                floor: group.blocks as u64,
                cap: (group.blocks * topology.steps()) as u64,
                free_cells,
            });
        }
    }
    kinds
}

/// Details of one draw of the uniform-budget sampler. Budgets are block
/// compute in MMACs, excluding non-block overhead.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformSample {
    pub schedule: CachingSchedule,
    /// `C*` as drawn from `U(0, C_max)`.
    pub target_mmacs: f64,
    /// `C*` rounded and clamped to `[step-0 floor, C_max]`.
    pub snapped_mmacs: u64,
    /// The feasible target actually solved for; equals the schedule cost.
    pub achieved_mmacs: u64,
    /// Active cell count per (group, component), step 0 included.
    pub counts: Vec<u64>,
}

/// Samples `k` for kinds with positive weight so that `sum w k = target`
/// (offsets above each floor). `None` when this draw found no solution.
fn solve_counts(
    weights: &[u64],
    caps: &[u64],
    target: u64,
    rng: &mut impl Rng,
) -> Option<Vec<u64>> {
    let n = weights.len();
    match n {
        0 => (target == 0).then(Vec::new),
        1 => (target.is_multiple_of(weights[0]) && target / weights[0] <= caps[0])
            .then(|| vec![target / weights[0]]),
        2 => {
            let sols = solve_two_var_diophantine(weights[0], weights[1], target, caps[0], caps[1]);
            if sols.is_empty() {
                return None;
            }
            let (a, b) = sols.get(rng.gen_range(0..sols.len())).unwrap();
            Some(vec![a, b])
        }
        _ => {
            let mut counts = Vec::with_capacity(n);
            let mut remaining = target;
            // Leading kinds beyond the enumerated one are drawn one by one
            // within the range that keeps the rest reachable.
            for i in 0..n - 3 {
                let rest_max: u64 = (i + 1..n).map(|j| weights[j] * caps[j]).sum();
                let lo = remaining.saturating_sub(rest_max).div_ceil(weights[i]);
                let hi = caps[i].min(remaining / weights[i]);
                if lo > hi {
                    return None;
                }
                let k = rng.gen_range(lo..=hi);
                counts.push(k);
                remaining -= k * weights[i];
            }
            let (wo, co) = (weights[n - 3], caps[n - 3]);
            let (w1, w2, c1, c2) = (weights[n - 2], weights[n - 1], caps[n - 2], caps[n - 1]);
            let per_outer: Vec<TwoVarSolutions> = (0..=co.min(remaining / wo))
                .map(|k| solve_two_var_diophantine(w1, w2, remaining - k * wo, c1, c2))
                .collect();
            let total: u64 = per_outer.iter().map(TwoVarSolutions::len).sum();
            if total == 0 {
                return None;
            }
            let mut pick = rng.gen_range(0..total);
            for (k, sols) in per_outer.iter().enumerate() {
                if pick < sols.len() {
                    let (a, b) = sols.get(pick).unwrap();
                    counts.extend([k as u64, a, b]);
                    return Some(counts);
                }
                pick -= sols.len();
            }
            unreachable!()
        }
    }
}

/// Largest-weight-first fill; lands within one maximum weight of `target`.
fn greedy_counts(weights: &[u64], caps: &[u64], target: u64) -> Vec<u64> {
    let mut remaining = target;
    weights
        .iter()
        .zip(caps)
        .map(|(&w, &cap)| {
            let k = cap.min(remaining / w);
            remaining -= k * w;
            k
        })
        .collect()
}

const SOLVE_ATTEMPTS: usize = 8;

/// Draws `C* ~ U(0, C_max)`, solves `sum w_c k_c = C*` in integer MMACs over
/// (group, component) counts, and spreads each count uniformly over the
/// kind's cells.
pub fn uniform_random_sample(topology: &Arc<ModelTopology>, rng: &mut impl Rng) -> UniformSample {
    let kinds = sampler_kinds(topology);
    let c_max: u64 = kinds.iter().map(|k| k.weight * k.cap).sum();
    let floor: u64 = kinds.iter().map(|k| k.weight * k.floor).sum();
    let target = rng.gen::<f64>() * c_max as f64;
    let snapped = (target.round() as u64).clamp(floor, c_max);

    let mut order: Vec<usize> = (0..kinds.len()).filter(|&i| kinds[i].weight > 0).collect();
    order.sort_by(|&a, &b| kinds[b].weight.cmp(&kinds[a].weight));
    let weights: Vec<u64> = order.iter().map(|&i| kinds[i].weight).collect();
    let caps: Vec<u64> = order
        .iter()
        .map(|&i| kinds[i].cap - kinds[i].floor)
        .collect();
    let max_w = weights.first().copied().unwrap_or(0);
    let g = weights.iter().fold(0, |acc, &w| gcd(acc, w)).max(1);
    let span = c_max - floor;
    let base = snapped - floor;

    // Only multiples of the weight gcd are reachable; walk outward from the
    // nearest one.
    let anchor = (base + g / 2) / g * g;
    let targets =
        std::iter::once(anchor).chain((1..).map(|i| i * g).take_while(|&d| d <= max_w).flat_map(
            |d| {
                [anchor.checked_add(d), anchor.checked_sub(d)]
                    .into_iter()
                    .flatten()
            },
        ));
    let reduced = targets
        .filter(|&t| t <= span && t.abs_diff(base) <= max_w)
        .find_map(|t| (0..SOLVE_ATTEMPTS).find_map(|_| solve_counts(&weights, &caps, t, rng)))
        .unwrap_or_else(|| greedy_counts(&weights, &caps, base));

    let mut counts: Vec<u64> = kinds.iter().map(|k| k.floor).collect();
    for (slot, &i) in order.iter().enumerate() {
        counts[i] += reduced[slot];
    }
    for (i, k) in kinds.iter().enumerate() {
        if k.weight == 0 {
            counts[i] = rng.gen_range(k.floor..=k.cap);
        }
    }

    let cps = topology.cells_per_step();
    let mut bits = vec![false; topology.total_cells()];
    bits[..cps].fill(true);
    for (k, &count) in kinds.iter().zip(&counts) {
        let extra = (count - k.floor) as usize;
        for j in index::sample(rng, k.free_cells.len(), extra) {
            bits[k.free_cells[j]] = true;
        }
    }
    let achieved = kinds.iter().zip(&counts).map(|(k, &c)| k.weight * c).sum();
    UniformSample {
        schedule: CachingSchedule::repaired(topology.clone(), bits),
        target_mmacs: target,
        snapped_mmacs: snapped,
        achieved_mmacs: achieved,
        counts,
    }
}

pub fn uniform_random_schedule(
    topology: &Arc<ModelTopology>,
    rng: &mut impl Rng,
) -> CachingSchedule {
    uniform_random_sample(topology, rng).schedule
}

/// Rounds of k-point crossover with random partners plus bit-flip mutation,
/// starting from `base`. Returns every schedule produced, `base` first.
pub fn perturbed_pool(
    base: &CachingSchedule,
    rounds: usize,
    rng: &mut impl Rng,
) -> Vec<CachingSchedule> {
    let params = GaParams {
        crossover_probability: 1.0,
        ..GaParams::default()
    };
    let per_bit = 1.0 / base.len() as f64;
    let mut pool = vec![base.clone()];
    for _ in 0..rounds {
        let mut next = Vec::with_capacity(pool.len());
        for a in &pool {
            let b = &pool[rng.gen_range(0..pool.len())];
            let (child, _, _) = crossover_k_point(a, b, &params, rng).expect("shared topology");
            next.push(mutate_bit_flip(&child, 1.0, per_bit, rng).schedule);
        }
        pool.extend(next);
    }
    pool
}

/// One seeding family with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedStrategy {
    Fora {
        interval: usize,
    },
    Tgate {
        gate_step: usize,
        interval: usize,
    },
    ComponentOnly {
        component: String,
        steps: usize,
        blocks: usize,
    },
    CrossSelfAllBlocks {
        interval: usize,
    },
    UniformRandom,
    TrueRandom {
        cache_probability: f64,
    },
    /// FORA seed perturbed by rounds of crossover and mutation.
    Perturbed {
        interval: usize,
        rounds: usize,
    },
}

impl SeedStrategy {
    /// Deterministic families produce the same schedule on every draw.
    pub fn is_deterministic(&self) -> bool {
        !matches!(
            self,
            Self::UniformRandom | Self::TrueRandom { .. } | Self::Perturbed { .. }
        )
    }

    /// Draws `count` schedules from this family.
    pub fn generate(
        &self,
        topology: &Arc<ModelTopology>,
        count: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<CachingSchedule>, SeedingError> {
        let one = |rng: &mut _| -> Result<CachingSchedule, SeedingError> {
            match self {
                Self::Fora { interval } => fora_schedule(topology, *interval),
                Self::Tgate {
                    gate_step,
                    interval,
                } => tgate_schedule(topology, *gate_step, *interval),
                Self::ComponentOnly {
                    component,
                    steps,
                    blocks,
                } => component_only_schedule(topology, component, *steps, *blocks),
                Self::CrossSelfAllBlocks { interval } => {
                    cross_self_all_blocks_schedule(topology, *interval)
                }
                Self::UniformRandom => Ok(uniform_random_schedule(topology, rng)),
                Self::TrueRandom { cache_probability } => {
                    true_random_schedule(topology, *cache_probability, rng)
                }
                Self::Perturbed { .. } => unreachable!(),
            }
        };
        if let Self::Perturbed { interval, rounds } = self {
            let base = fora_schedule(topology, *interval)?;
            let pool = perturbed_pool(&base, *rounds, rng);
            let amount = count.min(pool.len());
            let mut picks = index::sample(rng, pool.len(), amount).into_vec();
            picks.sort_unstable();
            return Ok(picks.into_iter().map(|i| pool[i].clone()).collect());
        }
        (0..count).map(|_| one(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    #[serde(flatten)]
    pub strategy: SeedStrategy,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

/// A list of strategies and how many schedules each contributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyMix {
    pub entries: Vec<MixEntry>,
}

impl StrategyMix {
    pub fn new(entries: Vec<MixEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self, SeedingError> {
        serde_json::from_str(text).map_err(|e| SeedingError::Mix(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mix serializes")
    }

    pub fn fora_intervals(intervals: impl IntoIterator<Item = usize>) -> Self {
        Self::new(
            intervals
                .into_iter()
                .map(|interval| MixEntry {
                    strategy: SeedStrategy::Fora { interval },
                    count: 1,
                })
                .collect(),
        )
    }

    /// Heuristic families that apply to the topology, plus random fill.
    pub fn default_for(topology: &ModelTopology) -> Self {
        let steps = topology.steps();
        let entry = |strategy, count| MixEntry { strategy, count };
        let mut entries: Vec<MixEntry> = (1..=6.min(steps))
            .map(|interval| entry(SeedStrategy::Fora { interval }, 1))
            .collect();
        let has = |name| !component_sites(topology, name).is_empty();
        let attn = has(SELF_ATTENTION) && has(CROSS_ATTENTION);
        if attn && steps >= 4 {
            for (m, k) in [
                (steps / 2, 1),
                (steps / 2, 2),
                (steps * 3 / 4, 1),
                (steps / 2, 5),
            ] {
                if m >= 2 {
                    entries.push(entry(
                        SeedStrategy::Tgate {
                            gate_step: m,
                            interval: k,
                        },
                        1,
                    ));
                }
            }
            for interval in [2, 3] {
                entries.push(entry(SeedStrategy::CrossSelfAllBlocks { interval }, 1));
            }
        }
        for name in [CROSS_ATTENTION, SELF_ATTENTION, FEEDFORWARD] {
            let sites = component_sites(topology, name).len();
            if sites == 0 || steps < 2 {
                continue;
            }
            for (s, b) in [(steps / 2, sites / 2), (steps - 1, sites)] {
                if s >= 1 && b >= 1 {
                    entries.push(entry(
                        SeedStrategy::ComponentOnly {
                            component: name.to_string(),
                            steps: s,
                            blocks: b,
                        },
                        1,
                    ));
                }
            }
        }
        entries.push(entry(
            SeedStrategy::Perturbed {
                interval: 2,
                rounds: 3,
            },
            4,
        ));
        entries.push(entry(
            SeedStrategy::TrueRandom {
                cache_probability: 0.5,
            },
            4,
        ));
        entries.push(entry(SeedStrategy::UniformRandom, 32));
        Self::new(entries)
    }
}

/// Draws `n` distinct candidates from `mix`. Oversized pools keep the most
/// and least recomputing members and sample the rest uniformly; undersized
/// pools gain the two anchors and are topped up with uniform-budget draws.
pub fn build_initial_population(
    topology: &Arc<ModelTopology>,
    mix: &StrategyMix,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Candidate>, SeedingError> {
    if n == 0 {
        return Err(invalid("population", "size must be >= 1"));
    }
    if mix.entries.is_empty() {
        return Err(SeedingError::EmptyMix);
    }
    let mut seen = HashSet::new();
    let mut pool: Vec<CachingSchedule> = Vec::new();
    let mut push = |pool: &mut Vec<CachingSchedule>, s: CachingSchedule| {
        if seen.insert(s.hash()) {
            pool.push(s);
        }
    };
    for e in &mix.entries {
        let count = if e.strategy.is_deterministic() {
            e.count.min(1)
        } else {
            e.count
        };
        for s in e.strategy.generate(topology, count, rng)? {
            push(&mut pool, s);
        }
    }

    let active = |s: &CachingSchedule| s.len() - s.cached_count();
    if pool.len() > n {
        let hi = (0..pool.len())
            .max_by_key(|&i| (active(&pool[i]), usize::MAX - i))
            .unwrap();
        let lo = (0..pool.len())
            .min_by_key(|&i| (active(&pool[i]), i))
            .unwrap();
        let mut keep: Vec<usize> = if n == 1 || hi == lo {
            vec![hi]
        } else {
            vec![hi, lo]
        };
        let rest: Vec<usize> = (0..pool.len()).filter(|i| !keep.contains(i)).collect();
        for j in index::sample(rng, rest.len(), n - keep.len()) {
            keep.push(rest[j]);
        }
        keep.sort_unstable();
        pool = keep.into_iter().map(|i| pool[i].clone()).collect();
    } else if pool.len() < n {
        push(
            &mut pool,
            CachingSchedule::new_full_recompute(topology.clone()),
        );
        if pool.len() < n {
            push(&mut pool, fora_schedule(topology, topology.steps())?);
        }
        let mut misses = 0;
        while pool.len() < n {
            let before = pool.len();
            push(&mut pool, uniform_random_schedule(topology, rng));
            if pool.len() == before {
                misses += 1;
                if misses > 64 * n {
                    // Tiny search spaces: allow duplicates rather than spin.
                    pool.push(uniform_random_schedule(topology, rng));
                }
            }
        }
    }
    Ok(pool.into_iter().map(Candidate::seed).collect())
}
