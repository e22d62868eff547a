//! Computational-cost objective, analytical token-caching MAC formulas and
//! cross-implementation latency normalization.
//!
//! Costs accumulate in integer MMACs (GMAC weights x 1000) so that flipping a
//! single bit changes the total by exactly that cell's weight.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{CachingSchedule, ModelTopology};

const MMACS_PER_TMAC: f64 = 1e6;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("schedule topology `{schedule}` does not match cost-model topology `{model}`")]
    TopologyMismatch { schedule: String, model: String },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub total_tmacs: f64,
    /// Block compute per step, excluding overhead.
    pub per_step: Vec<f64>,
    pub per_component_kind: BTreeMap<String, f64>,
    pub overhead_tmacs: f64,
    /// Exact total in MMACs.
    pub total_mmacs: u64,
}

/// Precomputed per-cell weights for one topology.
#[derive(Debug, Clone)]
pub struct CostModel {
    topology: Arc<ModelTopology>,
    step_weights: Vec<u64>,
    cell_kind: Vec<usize>,
    kinds: Vec<String>,
    overhead_mmacs: u64,
}

impl CostModel {
    pub fn new(topology: Arc<ModelTopology>) -> Self {
        let kinds = topology.component_kinds();
        let mut cell_kind = Vec::with_capacity(topology.cells_per_step());
        for g in topology.groups() {
            for _ in 0..g.blocks {
                for c in &g.components {
                    cell_kind.push(kinds.iter().position(|k| *k == c.name).unwrap());
                }
            }
        }
        Self {
            step_weights: topology.step_weights_mmacs(),
            overhead_mmacs: (topology.non_block_overhead_tmacs() * MMACS_PER_TMAC).round() as u64,
            topology,
            cell_kind,
            kinds,
        }
    }

    pub fn topology(&self) -> &Arc<ModelTopology> {
        &self.topology
    }

    fn check(&self, schedule: &CachingSchedule) -> Result<(), CostError> {
        let st = schedule.topology();
        if Arc::ptr_eq(st, &self.topology) || **st == *self.topology {
            Ok(())
        } else {
            Err(CostError::TopologyMismatch {
                schedule: format!("{} ({} steps)", st.name(), st.steps()),
                model: format!("{} ({} steps)", self.topology.name(), self.topology.steps()),
            })
        }
    }

    /// Exact block compute of the recomputed cells, in MMACs.
    pub fn block_mmacs(&self, schedule: &CachingSchedule) -> Result<u64, CostError> {
        self.check(schedule)?;
        let cps = self.step_weights.len();
        Ok(schedule
            .bits()
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| self.step_weights[i % cps])
            .sum())
    }

    pub fn total_mmacs(&self, schedule: &CachingSchedule) -> Result<u64, CostError> {
        Ok(self.block_mmacs(schedule)? + self.overhead_mmacs)
    }

    pub fn total_tmacs(&self, schedule: &CachingSchedule) -> Result<f64, CostError> {
        Ok(self.total_mmacs(schedule)? as f64 / MMACS_PER_TMAC)
    }

    /// Block compute of one full step, in MMACs.
    pub fn full_step_mmacs(&self) -> u64 {
        self.step_weights.iter().sum()
    }

    pub fn overhead_mmacs(&self) -> u64 {
        self.overhead_mmacs
    }

    pub fn cell_weight_mmacs(&self, index: usize) -> u64 {
        self.step_weights[index % self.step_weights.len()]
    }

    pub fn breakdown(&self, schedule: &CachingSchedule) -> Result<CostBreakdown, CostError> {
        self.check(schedule)?;
        let cps = self.step_weights.len();
        let mut per_step = vec![0u64; self.topology.steps()];
        let mut per_kind = vec![0u64; self.kinds.len()];
        for (i, _) in schedule.bits().iter().enumerate().filter(|(_, b)| **b) {
            let w = self.step_weights[i % cps];
            per_step[i / cps] += w;
            per_kind[self.cell_kind[i % cps]] += w;
        }
        let total_mmacs = per_step.iter().sum::<u64>() + self.overhead_mmacs;
        Ok(CostBreakdown {
            total_tmacs: total_mmacs as f64 / MMACS_PER_TMAC,
            per_step: per_step
                .into_iter()
                .map(|m| m as f64 / MMACS_PER_TMAC)
                .collect(),
            per_component_kind: self
                .kinds
                .iter()
                .cloned()
                .zip(per_kind.into_iter().map(|m| m as f64 / MMACS_PER_TMAC))
                .collect(),
            overhead_tmacs: self.overhead_mmacs as f64 / MMACS_PER_TMAC,
            total_mmacs,
        })
    }
}

/// `C(S)` for a schedule on its topology.
pub fn schedule_cost(
    schedule: &CachingSchedule,
    topology: &Arc<ModelTopology>,
) -> Result<CostBreakdown, CostError> {
    CostModel::new(topology.clone()).breakdown(schedule)
}

/// Token counts and widths for the analytical per-layer MAC formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub n_image_tokens: u64,
    pub n_text_tokens: u64,
    pub hidden_dim: u64,
    pub ffn_dim: u64,
    pub heads: u64,
}

// The formulas carry a 5/2 coefficient, so the exact forms return 2x MACs.

/// `2 * (4 N1 D^2 + 2 N1^2 D + 5/2 N1^2 H)`
pub fn toca_self_attention_x2(d: &AttentionDims) -> u128 {
    let (n1, dd, h) = (
        d.n_image_tokens as u128,
        d.hidden_dim as u128,
        d.heads as u128,
    );
    8 * n1 * dd * dd + 4 * n1 * n1 * dd + 5 * n1 * n1 * h
}

/// `2 * (2 D^2 (N1 + N2) + 2 N1 N2 D + 5/2 N1 N2 H)`
pub fn toca_cross_attention_x2(d: &AttentionDims) -> u128 {
    let (n1, n2) = (d.n_image_tokens as u128, d.n_text_tokens as u128);
    let (dd, h) = (d.hidden_dim as u128, d.heads as u128);
    4 * dd * dd * (n1 + n2) + 4 * n1 * n2 * dd + 5 * n1 * n2 * h
}

/// `2 * (8 N1 D_FFN^2 + 12 N1 D_FFN)`
pub fn toca_ffn_x2(d: &AttentionDims) -> u128 {
    let (n1, f) = (d.n_image_tokens as u128, d.ffn_dim as u128);
    16 * n1 * f * f + 24 * n1 * f
}

pub fn toca_macs_self_attention(d: &AttentionDims) -> f64 {
    toca_self_attention_x2(d) as f64 / 2.0
}

pub fn toca_macs_cross_attention(d: &AttentionDims) -> f64 {
    toca_cross_attention_x2(d) as f64 / 2.0
}

pub fn toca_macs_ffn(d: &AttentionDims) -> f64 {
    toca_ffn_x2(d) as f64 / 2.0
}

fn positive(name: &'static str, value: f64) -> Result<f64, CostError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(CostError::NonPositive { name, value })
    }
}

/// Applies another implementation's own speedup to our unaccelerated latency.
pub fn normalized_latency(
    cached_other_ms: f64,
    unaccel_other_ms: f64,
    unaccel_ours_ms: f64,
) -> Result<f64, CostError> {
    let c = positive("cached_other_ms", cached_other_ms)?;
    let u = positive("unaccel_other_ms", unaccel_other_ms)?;
    let ours = positive("unaccel_ours_ms", unaccel_ours_ms)?;
    if c == u {
        return Ok(ours);
    }
    Ok(c / u * ours)
}

pub fn speedup(baseline_ms: f64, accelerated_ms: f64) -> Result<f64, CostError> {
    Ok(positive("baseline_ms", baseline_ms)? / positive("accelerated_ms", accelerated_ms)?)
}
