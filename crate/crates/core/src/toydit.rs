//! A tiny deterministic DiT-shaped network for end-to-end runs without a GPU.
//!
//! Every cell of the paired topology gets its own small component: softmax
//! token mixing for self-attention, attention over a fixed condition matrix
//! for cross-attention, and a two-layer tanh map for everything else. Each
//! output is added to the residual stream. Quality loss is relative drift of
//! the final state from the full-recompute run.
//!
//! All arithmetic is f64 in plain sequential loops, so results are
//! reproducible for a fixed seed and platform math library.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::CostModel;
use crate::digest::sha256_hex;
use crate::evaluator::{EvalError, Evaluator};
use crate::exec::{self, ExecMode};
use crate::nsga2::ObjectiveVector;
use crate::rng::{stream, unit_f64, RunRng};
use crate::schedule::{CachingSchedule, ModelTopology};

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy model config: {0}")]
    InvalidConfig(String),
    #[error("schedule topology `{schedule}` does not match model topology `{model}`")]
    TopologyMismatch { schedule: String, model: String },
    #[error("baseline state has zero norm")]
    ZeroBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub seed: u64,
    pub token_count: usize,
    pub dim: usize,
    pub cond_tokens: usize,
    pub step_size: f64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            token_count: 16,
            dim: 8,
            cond_tokens: 4,
            step_size: 0.1,
        }
    }
}

impl ToyModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ToyError> {
        if self.token_count == 0 || self.dim == 0 || self.cond_tokens == 0 {
            return Err(ToyError::InvalidConfig(
                "token_count, dim and cond_tokens must be positive".into(),
            ));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(ToyError::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut RunRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (2.0 * unit_f64(rng) - 1.0) * scale)
            .collect();
        Self { rows, cols, data }
    }

    fn matmul(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_t(&self, other: &Mat) -> Mat {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[j * other.cols + k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    fn softmax_rows(&mut self, scale: f64) {
        for row in self.data.chunks_mut(self.cols) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v * scale - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Component {
    SelfAttention { wq: Mat, wk: Mat, wv: Mat, wo: Mat },
    CrossAttention { wq: Mat, wk: Mat, wv: Mat, wo: Mat },
    Feedforward { w1: Mat, b1: Vec<f64>, w2: Mat },
}

impl Component {
    fn for_name(name: &str, dim: usize, rng: &mut RunRng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        // Output projections are damped so deep stacks stay well scaled.
        let so = 0.5 * s;
        if name.contains("cross") {
            Self::CrossAttention {
                wq: Mat::random(dim, dim, s, rng),
                wk: Mat::random(dim, dim, s, rng),
                wv: Mat::random(dim, dim, s, rng),
                wo: Mat::random(dim, dim, so, rng),
            }
        } else if name.contains("attention") {
            Self::SelfAttention {
                wq: Mat::random(dim, dim, s, rng),
                wk: Mat::random(dim, dim, s, rng),
                wv: Mat::random(dim, dim, s, rng),
                wo: Mat::random(dim, dim, so, rng),
            }
        } else {
            let hidden = 2 * dim;
            Self::Feedforward {
                w1: Mat::random(dim, hidden, s, rng),
                b1: (0..hidden).map(|_| 2.0 * unit_f64(rng) - 1.0).collect(),
                w2: Mat::random(hidden, dim, so / 2f64.sqrt(), rng),
            }
        }
    }

    fn matrices(&self) -> Vec<&[f64]> {
        match self {
            Self::SelfAttention { wq, wk, wv, wo } | Self::CrossAttention { wq, wk, wv, wo } => {
                vec![&wq.data, &wk.data, &wv.data, &wo.data]
            }
            Self::Feedforward { w1, b1, w2 } => vec![&w1.data, b1, &w2.data],
        }
    }

    fn forward(&self, h: &Mat, cond: &Mat) -> Mat {
        match self {
            Self::SelfAttention { wq, wk, wv, wo } => attend(h, h, wq, wk, wv, wo),
            Self::CrossAttention { wq, wk, wv, wo } => attend(h, cond, wq, wk, wv, wo),
            Self::Feedforward { w1, b1, w2 } => {
                let mut u = h.matmul(w1);
                for row in u.data.chunks_mut(u.cols) {
                    for (v, b) in row.iter_mut().zip(b1) {
                        *v = (*v + b).tanh();
                    }
                }
                u.matmul(w2)
            }
        }
    }
}

fn attend(h: &Mat, ctx: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, wo: &Mat) -> Mat {
    let q = h.matmul(wq);
    let k = ctx.matmul(wk);
    let v = ctx.matmul(wv);
    let mut a = q.matmul_t(&k);
    a.softmax_rows(1.0 / (q.cols as f64).sqrt());
    a.matmul(&v).matmul(wo)
}

/// Step-conditioned layer norm: normalize each token, then scale by
/// `1 + 0.1 sin(...)` with a per-channel frequency.
fn modulated_norm(x: &Mat, step: usize, steps: usize) -> Mat {
    let mut out = x.clone();
    let tau = step as f64 / steps.max(1) as f64;
    for row in out.data.chunks_mut(x.cols) {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            let gain = 1.0 + 0.1 * (tau * (j + 1) as f64 * std::f64::consts::PI).sin();
            *v = (*v - mean) * inv * gain;
        }
    }
    out
}

/// One line of an instrumented run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub cell: usize,
    pub recomputed: bool,
    /// Step whose computation produced the output used here.
    pub computed_at: usize,
    pub output_digest: String,
}

fn digest_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    topology: Arc<ModelTopology>,
    /// One component per cell of a step slice.
    cells: Vec<Component>,
    cond: Mat,
    initial: Mat,
}

impl ToyModel {
    pub fn new(config: ToyModelConfig, topology: Arc<ModelTopology>) -> Result<Self, ToyError> {
        config.validate()?;
        let mut rng = RunRng::new(config.seed, stream::TOY_MODEL);
        let d = config.dim;
        let initial = Mat::random(config.token_count, d, 1.0, &mut rng);
        let cond = Mat::random(config.cond_tokens, d, 1.0, &mut rng);
        let mut cells = Vec::with_capacity(topology.cells_per_step());
        for g in topology.groups() {
            for _ in 0..g.blocks {
                for c in &g.components {
                    cells.push(Component::for_name(&c.name, d, &mut rng));
                }
            }
        }
        Ok(Self {
            config,
            topology,
            cells,
            cond,
            initial,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &Arc<ModelTopology> {
        &self.topology
    }

    /// SHA-256 over the little-endian bytes of the initial state, the
    /// condition and every weight in cell order.
    pub fn weights_digest(&self) -> String {
        let mut all: Vec<f64> = self.initial.data.clone();
        all.extend(&self.cond.data);
        for c in &self.cells {
            for m in c.matrices() {
                all.extend_from_slice(m);
            }
        }
        digest_f64s(&all)
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.initial.data.clone()
    }

    fn check(&self, schedule: &CachingSchedule) -> Result<(), ToyError> {
        let st = schedule.topology();
        if Arc::ptr_eq(st, &self.topology) || **st == *self.topology {
            Ok(())
        } else {
            Err(ToyError::TopologyMismatch {
                schedule: st.name().to_string(),
                model: self.topology.name().to_string(),
            })
        }
    }

    /// Final state after all steps of `schedule`.
    pub fn denoise(&self, schedule: &CachingSchedule) -> Result<Vec<f64>, ToyError> {
        self.denoise_steps(schedule, self.topology.steps())
    }

    /// State after the first `n` steps (clamped to the step count).
    pub fn denoise_steps(
        &self,
        schedule: &CachingSchedule,
        n: usize,
    ) -> Result<Vec<f64>, ToyError> {
        self.check(schedule)?;
        Ok(self.run(schedule, n, None).data)
    }

    /// Like [`denoise`](Self::denoise) but records every cell visit.
    pub fn denoise_traced(
        &self,
        schedule: &CachingSchedule,
    ) -> Result<(Vec<f64>, Vec<TraceEntry>), ToyError> {
        self.check(schedule)?;
        let mut trace = Vec::new();
        let z = self.run(schedule, self.topology.steps(), Some(&mut trace));
        Ok((z.data, trace))
    }

    fn run(
        &self,
        schedule: &CachingSchedule,
        n: usize,
        mut trace: Option<&mut Vec<TraceEntry>>,
    ) -> Mat {
        let steps = self.topology.steps();
        let cps = self.cells.len();
        let mut cache: Vec<Option<(Mat, usize)>> = vec![None; cps];
        let mut z = self.initial.clone();
        for step in 0..n.min(steps) {
            let mut x = z.clone();
            for (cell, comp) in self.cells.iter().enumerate() {
                let recompute = schedule.get(step * cps + cell);
                if recompute {
                    let out = comp.forward(&modulated_norm(&x, step, steps), &self.cond);
                    cache[cell] = Some((out, step));
                }
                let (out, at) = cache[cell]
                    .as_ref()
                    .expect("cached cell read before any recompute");
                if let Some(t) = trace.as_deref_mut() {
                    t.push(TraceEntry {
                        step,
                        cell,
                        recomputed: recompute,
                        computed_at: *at,
                        output_digest: digest_f64s(&out.data),
                    });
                }
                for (xv, ov) in x.data.iter_mut().zip(&out.data) {
                    *xv += ov;
                }
            }
            let h = self.config.step_size;
            for (zv, xv) in z.data.iter_mut().zip(&x.data) {
                *zv -= h * xv;
            }
        }
        z
    }

    /// Full-recompute forward pass with no cache machinery at all.
    pub fn reference_denoise(&self) -> Vec<f64> {
        let steps = self.topology.steps();
        let mut z = self.initial.clone();
        for step in 0..steps {
            let mut x = z.clone();
            for comp in &self.cells {
                let out = comp.forward(&modulated_norm(&x, step, steps), &self.cond);
                for (xv, ov) in x.data.iter_mut().zip(&out.data) {
                    *xv += ov;
                }
            }
            for (zv, xv) in z.data.iter_mut().zip(&x.data) {
                *zv -= self.config.step_size * xv;
            }
        }
        z.data
    }

    pub fn baseline_state(&self) -> Vec<f64> {
        self.run(
            &CachingSchedule::new_full_recompute(self.topology.clone()),
            self.topology.steps(),
            None,
        )
        .data
    }

    pub fn quality_loss(&self, schedule: &CachingSchedule) -> Result<f64, ToyError> {
        relative_drift(&self.denoise(schedule)?, &self.baseline_state())
    }
}

/// `||a - b|| / ||b||` in the Frobenius norm.
pub fn relative_drift(a: &[f64], baseline: &[f64]) -> Result<f64, ToyError> {
    let norm = baseline.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(ToyError::ZeroBaseline);
    }
    let diff = a
        .iter()
        .zip(baseline)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm)
}

/// Exact MAC cost plus toy-model drift, batched through [`exec::map`].
#[derive(Debug, Clone)]
pub struct ToyEvaluator {
    model: Arc<ToyModel>,
    cost: CostModel,
    baseline: Vec<f64>,
    mode: ExecMode,
}

impl ToyEvaluator {
    pub fn new(model: ToyModel, mode: ExecMode) -> Result<Self, ToyError> {
        let baseline = model.baseline_state();
        if baseline.iter().all(|v| *v == 0.0) {
            return Err(ToyError::ZeroBaseline);
        }
        Ok(Self {
            cost: CostModel::new(model.topology().clone()),
            model: Arc::new(model),
            baseline,
            mode,
        })
    }

    pub fn for_topology(
        topology: Arc<ModelTopology>,
        seed: u64,
        mode: ExecMode,
    ) -> Result<Self, ToyError> {
        Self::new(
            ToyModel::new(ToyModelConfig::with_seed(seed), topology)?,
            mode,
        )
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn evaluate_one(&self, schedule: &CachingSchedule) -> Result<ObjectiveVector, EvalError> {
        let cost = self.cost.total_tmacs(schedule)?;
        let state = self
            .model
            .denoise(schedule)
            .map_err(|e| EvalError::Candidate {
                candidate: schedule.hash(),
                message: e.to_string(),
            })?;
        let loss = relative_drift(&state, &self.baseline).map_err(|e| EvalError::Candidate {
            candidate: schedule.hash(),
            message: e.to_string(),
        })?;
        Ok(ObjectiveVector::new(cost, loss))
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, schedules: &[CachingSchedule]) -> Result<Vec<ObjectiveVector>, EvalError> {
        exec::map(self.mode, schedules, |s| self.evaluate_one(s))
            .into_iter()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{build_initial_population, fora_schedule, StrategyMix};

    const GOLDEN: &str = include_str!("../tests/data/v1/toy_golden.json");

    #[derive(Deserialize)]
    struct Golden {
        seed: u64,
        topology: String,
        weights_sha256: String,
        full_recompute_state_sha256: String,
        all_cached_loss: f64,
    }

    fn golden() -> Golden {
        serde_json::from_str(GOLDEN).unwrap()
    }

    fn toy(seed: u64) -> ToyModel {
        let t = Arc::new(ModelTopology::builtin("toy").unwrap());
        ToyModel::new(ToyModelConfig::with_seed(seed), t).unwrap()
    }

    #[test]
    fn weights_are_seeded() {
        assert_eq!(toy(0), toy(0));
        assert_ne!(toy(0).weights_digest(), toy(1).weights_digest());
        assert_ne!(toy(0).cells[0], toy(1).cells[0]);
    }

    #[test]
    fn golden_digests() {
        let g = golden();
        let t = Arc::new(ModelTopology::builtin(&g.topology).unwrap());
        let m = ToyModel::new(ToyModelConfig::with_seed(g.seed), t.clone()).unwrap();
        assert_eq!(m.weights_digest(), g.weights_sha256);
        assert_eq!(
            digest_f64s(&m.baseline_state()),
            g.full_recompute_state_sha256
        );
        let cached = fora_schedule(&t, t.steps()).unwrap();
        let loss = m.quality_loss(&cached).unwrap();
        assert!((loss - g.all_cached_loss).abs() <= 1e-12 * g.all_cached_loss.max(1.0));
    }

    #[test]
    fn cached_machinery_matches_reference_when_unused() {
        let m = toy(4);
        assert_eq!(m.baseline_state(), m.reference_denoise());
    }

    #[test]
    fn zero_steps_is_initial_state() {
        let m = toy(2);
        let s = CachingSchedule::new_full_recompute(m.topology().clone());
        assert_eq!(m.denoise_steps(&s, 0).unwrap(), m.initial_state());
    }

    #[test]
    fn cached_cells_reuse_last_recompute() {
        let m = toy(0);
        let t = m.topology().clone();
        let s = fora_schedule(&t, 3).unwrap();
        let (_, trace) = m.denoise_traced(&s).unwrap();
        let cps = t.cells_per_step();
        for e in &trace {
            let last = (0..=e.step)
                .rev()
                .find(|&st| s.get(st * cps + e.cell))
                .unwrap();
            assert_eq!(e.computed_at, last);
            assert_eq!(e.recomputed, last == e.step);
            let origin = &trace[last * cps + e.cell];
            assert_eq!(e.output_digest, origin.output_digest);
        }
        // Steps 1 and 2 both reuse the step-0 tensor.
        assert_eq!(
            trace[cps + 5].output_digest,
            trace[2 * cps + 5].output_digest
        );
    }

    #[test]
    fn all_cached_repeats_step_zero_outputs() {
        // One block: with everything cached after step 0 each step adds the
        // same total residual, so z_{t+1} = (1 - h) z_t - h R.
        let t = Arc::new(
            ModelTopology::new(
                "one",
                6,
                vec![ModelTopology::builtin("toy").unwrap().groups()[0].clone()]
                    .into_iter()
                    .map(|mut g| {
                        g.blocks = 1;
                        g
                    })
                    .collect(),
                0.0,
            )
            .unwrap(),
        );
        let m = ToyModel::new(ToyModelConfig::with_seed(0), t.clone()).unwrap();
        let s = fora_schedule(&t, 6).unwrap();
        let (state, trace) = m.denoise_traced(&s).unwrap();
        let steps0: Vec<f64> = m.initial_state();
        let mut r = vec![0.0; steps0.len()];
        let mut x = Mat {
            rows: m.config.token_count,
            cols: m.config.dim,
            data: steps0.clone(),
        };
        for comp in &m.cells {
            let out = comp.forward(&modulated_norm(&x, 0, 6), &m.cond);
            for ((xv, rv), ov) in x.data.iter_mut().zip(r.iter_mut()).zip(&out.data) {
                *xv += ov;
                *rv += ov;
            }
        }
        let h = m.config.step_size;
        let mut z = steps0;
        for _ in 0..6 {
            for (zv, rv) in z.iter_mut().zip(&r) {
                *zv = *zv - h * (*zv + rv);
            }
        }
        assert!(state.iter().zip(&z).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(trace.iter().all(|e| e.computed_at == 0));
    }

    #[test]
    fn quality_loss_properties() {
        let m = toy(0);
        let t = m.topology().clone();
        let full = CachingSchedule::new_full_recompute(t.clone());
        assert_eq!(m.quality_loss(&full).unwrap(), 0.0);
        let f2 = fora_schedule(&t, 2).unwrap();
        let l2 = m.quality_loss(&f2).unwrap();
        assert!(l2 > 0.0 && l2.is_finite());
        let flipped = f2.with_bit(t.cells_per_step() + 3, true);
        let lf = m.quality_loss(&flipped).unwrap();
        assert!(lf.is_finite() && lf != l2);
        assert_eq!(lf, m.quality_loss(&flipped).unwrap());
    }

    #[test]
    fn evaluator_batches_and_costs() {
        let t = Arc::new(ModelTopology::builtin("toy").unwrap());
        let ev = ToyEvaluator::for_topology(t.clone(), 0, ExecMode::Parallel).unwrap();
        let full = CachingSchedule::new_full_recompute(t.clone());
        let f2 = fora_schedule(&t, 2).unwrap();
        let out = ev
            .evaluate(&[full.clone(), f2.clone(), f2.clone()])
            .unwrap();
        // 6 blocks x (3 + 2 + 5) GMACs x 20 steps.
        assert_eq!(out[0], ObjectiveVector::new(1.2, 0.0));
        assert!((out[1].cost_tmacs - 0.6).abs() < 1e-12);
        assert!(out[1].quality_loss > 0.0);
        assert_eq!(out[1], out[2]);
        let seq = ev.clone().with_mode(ExecMode::Sequential);
        assert_eq!(seq.evaluate(&[f2]).unwrap()[0], out[1]);
    }

    #[test]
    fn toy_model_has_a_real_tradeoff() {
        let t = Arc::new(ModelTopology::builtin("toy").unwrap());
        let ev = ToyEvaluator::for_topology(t.clone(), 0, ExecMode::Parallel).unwrap();
        let mut rng = RunRng::new(0, stream::SEEDING);
        let pop =
            build_initial_population(&t, &StrategyMix::default_for(&t), 24, &mut rng).unwrap();
        let schedules: Vec<_> = pop.into_iter().map(|c| c.schedule).collect();
        let objs = ev.evaluate(&schedules).unwrap();
        let conflict = objs.iter().any(|a| {
            objs.iter()
                .any(|b| a.cost_tmacs < b.cost_tmacs && a.quality_loss > b.quality_loss)
        });
        assert!(conflict);
    }
}
