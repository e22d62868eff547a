//! Model topologies and binary caching schedules.
//!
//! A schedule is a flat bit vector over `(step, group, block, component)`
//! cells laid out step-major. A bit of `1` means the component is recomputed
//! at that step, `0` means the output cached at the most recent recompute is
//! reused. Step 0 has nothing to reuse, so every step-0 bit is `1`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::short_digest;

pub const FORMAT_VERSION: u32 = 1;

const BUILTIN_TOPOLOGIES: &[(&str, &str)] = &[
    ("pixart-like", include_str!("../configs/pixart-like.json")),
    ("flux-like", include_str!("../configs/flux-like.json")),
    ("toy", include_str!("../configs/toy.json")),
];

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("unknown topology `{0}` (not a built-in name or readable file)")]
    UnknownTopology(String),
    #[error("{axis} index {value} out of bounds (limit {limit})")]
    IndexOutOfBounds {
        axis: &'static str,
        value: usize,
        limit: usize,
    },
    #[error("malformed schedule document: {0}")]
    Malformed(String),
    #[error("unsupported format_version {0}")]
    UnsupportedFormat(u32),
    #[error("bit vector length {actual} does not match topology ({expected} cells)")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("schedule does not match topology: {0}")]
    TopologyMismatch(String),
    #[error("step-0 cell {cell} is cached; the first step must recompute every component")]
    FirstStepCached { cell: usize },
    #[error(
        "cannot rescale {from} steps to {to} steps; only exact 2x and 1/2x ratios are supported"
    )]
    UnsupportedRatio { from: usize, to: usize },
    #[error("cannot downscale an odd step count ({0})")]
    OddStepCount(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One cacheable sub-layer of a transformer block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub name: String,
    /// GMACs for one execution of this component in one block.
    pub mac_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub name: String,
    pub blocks: usize,
    pub components: Vec<ComponentSpec>,
}

/// On-disk topology document.
#[derive(Serialize, Deserialize)]
struct TopologyDoc {
    format_version: u32,
    name: String,
    steps: usize,
    groups: Vec<BlockGroup>,
    non_block_overhead_tmacs: f64,
}

/// Inference step count plus the ordered block groups of a DiT.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTopology {
    name: String,
    steps: usize,
    groups: Vec<BlockGroup>,
    non_block_overhead_tmacs: f64,
    group_offsets: Vec<usize>,
    cells_per_step: usize,
}

/// Decoded coordinates of one schedule cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Cell {
    pub step: usize,
    pub group: usize,
    pub block: usize,
    pub component: usize,
}

impl ModelTopology {
    pub fn new(
        name: impl Into<String>,
        steps: usize,
        groups: Vec<BlockGroup>,
        non_block_overhead_tmacs: f64,
    ) -> Result<Self, ScheduleError> {
        let name = name.into();
        if steps == 0 {
            return Err(ScheduleError::InvalidTopology("steps must be >= 1".into()));
        }
        if groups.is_empty() {
            return Err(ScheduleError::InvalidTopology(
                "at least one block group is required".into(),
            ));
        }
        if !(non_block_overhead_tmacs.is_finite() && non_block_overhead_tmacs >= 0.0) {
            return Err(ScheduleError::InvalidTopology(
                "non_block_overhead_tmacs must be a non-negative number".into(),
            ));
        }
        let mut group_offsets = Vec::with_capacity(groups.len());
        let mut cells_per_step = 0;
        for group in &groups {
            if group.blocks == 0 {
                return Err(ScheduleError::InvalidTopology(format!(
                    "group `{}` has zero blocks",
                    group.name
                )));
            }
            if group.components.is_empty() {
                return Err(ScheduleError::InvalidTopology(format!(
                    "group `{}` has no components",
                    group.name
                )));
            }
            for (i, c) in group.components.iter().enumerate() {
                if !(c.mac_weight.is_finite() && c.mac_weight >= 0.0) {
                    return Err(ScheduleError::InvalidTopology(format!(
                        "component `{}` has invalid mac_weight {}",
                        c.name, c.mac_weight
                    )));
                }
                if group.components[..i].iter().any(|o| o.name == c.name) {
                    return Err(ScheduleError::InvalidTopology(format!(
                        "duplicate component `{}` in group `{}`",
                        c.name, group.name
                    )));
                }
            }
            group_offsets.push(cells_per_step);
            cells_per_step += group.blocks * group.components.len();
        }
        Ok(Self {
            name,
            steps,
            groups,
            non_block_overhead_tmacs,
            group_offsets,
            cells_per_step,
        })
    }

    /// One of the shipped configs: `pixart-like`, `flux-like`, `toy`.
    pub fn builtin(name: &str) -> Result<Self, ScheduleError> {
        BUILTIN_TOPOLOGIES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text))
            .unwrap_or_else(|| Err(ScheduleError::UnknownTopology(name.to_string())))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_TOPOLOGIES.iter().map(|(n, _)| *n)
    }

    /// Resolves a built-in name first, then a file path.
    pub fn load(name_or_path: &str) -> Result<Self, ScheduleError> {
        if BUILTIN_TOPOLOGIES.iter().any(|(n, _)| *n == name_or_path) {
            return Self::builtin(name_or_path);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(ScheduleError::UnknownTopology(name_or_path.to_string()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        let doc: TopologyDoc =
            serde_json::from_str(text).map_err(|e| ScheduleError::Malformed(e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(ScheduleError::UnsupportedFormat(doc.format_version));
        }
        Self::new(
            doc.name,
            doc.steps,
            doc.groups,
            doc.non_block_overhead_tmacs,
        )
    }

    pub fn to_json(&self) -> String {
        let doc = TopologyDoc {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            steps: self.steps,
            groups: self.groups.clone(),
            non_block_overhead_tmacs: self.non_block_overhead_tmacs,
        };
        serde_json::to_string_pretty(&doc).expect("topology serializes")
    }

    /// Stable short digest of the canonical topology document.
    pub fn hash(&self) -> String {
        let doc = TopologyDoc {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            steps: self.steps,
            groups: self.groups.clone(),
            non_block_overhead_tmacs: self.non_block_overhead_tmacs,
        };
        let canonical = serde_json::to_string(&doc).expect("topology serializes");
        short_digest(canonical.as_bytes())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn groups(&self) -> &[BlockGroup] {
        &self.groups
    }

    pub fn non_block_overhead_tmacs(&self) -> f64 {
        self.non_block_overhead_tmacs
    }

    /// Number of cells in one step slice, `sum(B_i * C_i)`.
    pub fn cells_per_step(&self) -> usize {
        self.cells_per_step
    }

    pub fn total_cells(&self) -> usize {
        self.steps * self.cells_per_step
    }

    /// Same block structure with a different step count.
    pub fn with_steps(&self, steps: usize) -> Result<Self, ScheduleError> {
        Self::new(
            self.name.clone(),
            steps,
            self.groups.clone(),
            self.non_block_overhead_tmacs,
        )
    }

    /// True when block groups, block counts and component names agree.
    pub fn same_block_structure(&self, other: &ModelTopology) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.name == b.name
                    && a.blocks == b.blocks
                    && a.components.len() == b.components.len()
                    && a.components
                        .iter()
                        .zip(&b.components)
                        .all(|(x, y)| x.name == y.name)
            })
    }

    pub fn cell_index(
        &self,
        step: usize,
        group: usize,
        block: usize,
        component: usize,
    ) -> Result<usize, ScheduleError> {
        check_bound("step", step, self.steps)?;
        check_bound("group", group, self.groups.len())?;
        let g = &self.groups[group];
        check_bound("block", block, g.blocks)?;
        check_bound("component", component, g.components.len())?;
        Ok(step * self.cells_per_step
            + self.group_offsets[group]
            + block * g.components.len()
            + component)
    }

    pub fn cell_coords(&self, index: usize) -> Result<Cell, ScheduleError> {
        check_bound("cell", index, self.total_cells())?;
        let step = index / self.cells_per_step;
        let within = index % self.cells_per_step;
        let group = match self.group_offsets.binary_search(&within) {
            Ok(g) => g,
            Err(g) => g - 1,
        };
        let rel = within - self.group_offsets[group];
        let per_block = self.groups[group].components.len();
        Ok(Cell {
            step,
            group,
            block: rel / per_block,
            component: rel % per_block,
        })
    }

    /// Per-cell weights of one step slice in integer MMACs (GMACs x 1000).
    pub fn step_weights_mmacs(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.cells_per_step);
        for g in &self.groups {
            for _ in 0..g.blocks {
                out.extend(g.components.iter().map(|c| gmacs_to_mmacs(c.mac_weight)));
            }
        }
        out
    }

    /// Component names in first-seen order across groups.
    pub fn component_kinds(&self) -> Vec<String> {
        let mut kinds: Vec<String> = Vec::new();
        for g in &self.groups {
            for c in &g.components {
                if !kinds.contains(&c.name) {
                    kinds.push(c.name.clone());
                }
            }
        }
        kinds
    }
}

pub(crate) fn gmacs_to_mmacs(gmacs: f64) -> u64 {
    (gmacs * 1000.0).round() as u64
}

fn check_bound(axis: &'static str, value: usize, limit: usize) -> Result<(), ScheduleError> {
    if value < limit {
        Ok(())
    } else {
        Err(ScheduleError::IndexOutOfBounds { axis, value, limit })
    }
}

/// On-disk schedule document.
#[derive(Serialize, Deserialize)]
struct ScheduleDoc {
    format_version: u32,
    topology: String,
    steps: usize,
    groups: Vec<ScheduleGroupDoc>,
    bits: String,
}

#[derive(Serialize, Deserialize)]
struct ScheduleGroupDoc {
    name: String,
    blocks: usize,
    components: Vec<String>,
}

/// The binary caching tensor `S`, flattened step-major.
#[derive(Clone, PartialEq)]
pub struct CachingSchedule {
    topology: Arc<ModelTopology>,
    bits: Vec<bool>,
}

impl fmt::Debug for CachingSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CachingSchedule")
            .field("topology", &self.topology.name)
            .field("steps", &self.topology.steps)
            .field("cached_fraction", &self.cached_fraction())
            .field("hash", &self.hash())
            .finish()
    }
}

impl CachingSchedule {
    pub fn new_full_recompute(topology: Arc<ModelTopology>) -> Self {
        let bits = vec![true; topology.total_cells()];
        Self { topology, bits }
    }

    /// Builds a schedule and validates both length and the step-0 rule.
    pub fn from_bits(topology: Arc<ModelTopology>, bits: Vec<bool>) -> Result<Self, ScheduleError> {
        let s = Self::from_bits_unvalidated(topology, bits)?;
        s.validate()?;
        Ok(s)
    }

    /// Length-checked only; callers must repair or validate step 0.
    pub fn from_bits_unvalidated(
        topology: Arc<ModelTopology>,
        bits: Vec<bool>,
    ) -> Result<Self, ScheduleError> {
        if bits.len() != topology.total_cells() {
            return Err(ScheduleError::LengthMismatch {
                expected: topology.total_cells(),
                actual: bits.len(),
            });
        }
        Ok(Self { topology, bits })
    }

    /// Builds from raw bits and forces step 0 to recompute.
    pub(crate) fn repaired(topology: Arc<ModelTopology>, mut bits: Vec<bool>) -> Self {
        debug_assert_eq!(bits.len(), topology.total_cells());
        let cps = topology.cells_per_step();
        bits[..cps].fill(true);
        Self { topology, bits }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.bits.len() != self.topology.total_cells() {
            return Err(ScheduleError::LengthMismatch {
                expected: self.topology.total_cells(),
                actual: self.bits.len(),
            });
        }
        match self.step_slice(0).iter().position(|b| !b) {
            Some(cell) => Err(ScheduleError::FirstStepCached { cell }),
            None => Ok(()),
        }
    }

    pub fn enforce_first_step_recompute(&self) -> Self {
        Self::repaired(self.topology.clone(), self.bits.clone())
    }

    pub fn topology(&self) -> &Arc<ModelTopology> {
        &self.topology
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn is_recompute(
        &self,
        step: usize,
        group: usize,
        block: usize,
        component: usize,
    ) -> Result<bool, ScheduleError> {
        Ok(self.bits[self.topology.cell_index(step, group, block, component)?])
    }

    /// Returns a copy with one cell overwritten. Step-0 cells are not exempt,
    /// so this can produce an invalid schedule on purpose.
    pub fn with_bit(&self, index: usize, value: bool) -> Self {
        let mut bits = self.bits.clone();
        bits[index] = value;
        Self {
            topology: self.topology.clone(),
            bits,
        }
    }

    pub fn step_slice(&self, step: usize) -> &[bool] {
        let cps = self.topology.cells_per_step();
        &self.bits[step * cps..(step + 1) * cps]
    }

    pub fn cached_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn cached_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.cached_count() as f64 / self.bits.len() as f64
    }

    /// Packed little-endian bit vector: bit `i` lives in byte `i / 8` at bit `i % 8`.
    pub fn packed(&self) -> Vec<u8> {
        pack_bits(&self.bits)
    }

    pub fn to_base64(&self) -> String {
        BASE64.encode(self.packed())
    }

    pub fn from_base64(topology: Arc<ModelTopology>, encoded: &str) -> Result<Self, ScheduleError> {
        let bytes = BASE64
            .decode(encoded.trim())
            .map_err(|e| ScheduleError::Malformed(format!("bits: {e}")))?;
        let n = topology.total_cells();
        if bytes.len() != n.div_ceil(8) {
            return Err(ScheduleError::LengthMismatch {
                expected: n,
                actual: bytes.len() * 8,
            });
        }
        if !n.is_multiple_of(8) && bytes[bytes.len() - 1] >> (n % 8) != 0 {
            return Err(ScheduleError::Malformed("non-zero padding bits".into()));
        }
        Self::from_bits(topology, unpack_bits(&bytes, n))
    }

    /// Stable 16-hex-digit identifier over the packed bits.
    pub fn hash(&self) -> String {
        let mut buf = (self.bits.len() as u64).to_le_bytes().to_vec();
        buf.extend(self.packed());
        short_digest(&buf)
    }

    pub fn to_json(&self) -> String {
        let t = &self.topology;
        let doc = ScheduleDoc {
            format_version: FORMAT_VERSION,
            topology: t.name.clone(),
            steps: t.steps,
            groups: t
                .groups
                .iter()
                .map(|g| ScheduleGroupDoc {
                    name: g.name.clone(),
                    blocks: g.blocks,
                    components: g.components.iter().map(|c| c.name.clone()).collect(),
                })
                .collect(),
            bits: self.to_base64(),
        };
        serde_json::to_string(&doc).expect("schedule serializes")
    }

    pub fn from_json(text: &str, topology: Arc<ModelTopology>) -> Result<Self, ScheduleError> {
        let doc: ScheduleDoc =
            serde_json::from_str(text).map_err(|e| ScheduleError::Malformed(e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(ScheduleError::UnsupportedFormat(doc.format_version));
        }
        if doc.topology != topology.name {
            return Err(ScheduleError::TopologyMismatch(format!(
                "document names topology `{}`, expected `{}`",
                doc.topology, topology.name
            )));
        }
        if doc.steps != topology.steps {
            return Err(ScheduleError::TopologyMismatch(format!(
                "document has {} steps, topology has {}",
                doc.steps, topology.steps
            )));
        }
        let structure_ok = doc.groups.len() == topology.groups.len()
            && doc.groups.iter().zip(&topology.groups).all(|(d, g)| {
                d.name == g.name
                    && d.blocks == g.blocks
                    && d.components.len() == g.components.len()
                    && d.components
                        .iter()
                        .zip(&g.components)
                        .all(|(a, b)| *a == b.name)
            });
        if !structure_ok {
            return Err(ScheduleError::TopologyMismatch(
                "block groups differ from topology".into(),
            ));
        }
        Self::from_base64(topology, &doc.bits)
    }

    /// Topology name and step count from a schedule document header.
    pub fn header_steps(text: &str) -> Result<(String, usize), ScheduleError> {
        let doc: ScheduleDoc =
            serde_json::from_str(text).map_err(|e| ScheduleError::Malformed(e.to_string()))?;
        Ok((doc.topology, doc.steps))
    }

    /// Doubles the step count: output step `i` copies input step `i / 2`.
    pub fn upscale_steps(&self) -> Self {
        let target = Arc::new(
            self.topology
                .with_steps(self.topology.steps * 2)
                .expect("doubling a valid topology stays valid"),
        );
        let cps = self.topology.cells_per_step();
        let mut bits = Vec::with_capacity(self.bits.len() * 2);
        for step in 0..target.steps {
            bits.extend_from_slice(&self.bits[(step / 2) * cps..(step / 2 + 1) * cps]);
        }
        Self {
            topology: target,
            bits,
        }
    }

    /// Halves the step count: a cell stays cached only if it is cached in
    /// both steps `2i` and `2i + 1`.
    pub fn downscale_steps(&self) -> Result<Self, ScheduleError> {
        let steps = self.topology.steps;
        if !steps.is_multiple_of(2) {
            return Err(ScheduleError::OddStepCount(steps));
        }
        let target = Arc::new(self.topology.with_steps(steps / 2)?);
        let cps = self.topology.cells_per_step();
        let mut bits = Vec::with_capacity(self.bits.len() / 2);
        for step in 0..target.steps {
            let even = &self.bits[2 * step * cps..(2 * step + 1) * cps];
            let odd = &self.bits[(2 * step + 1) * cps..(2 * step + 2) * cps];
            bits.extend(even.iter().zip(odd).map(|(a, b)| *a || *b));
        }
        Ok(Self {
            topology: target,
            bits,
        })
    }

    pub fn rescale_to_steps(&self, steps: usize) -> Result<Self, ScheduleError> {
        let from = self.topology.steps;
        if steps == from {
            Ok(self.clone())
        } else if steps == from * 2 {
            Ok(self.upscale_steps())
        } else if steps * 2 == from {
            self.downscale_steps()
        } else {
            Err(ScheduleError::UnsupportedRatio { from, to: steps })
        }
    }

    /// Rescales onto an explicit target topology, which must share the block
    /// structure and differ in steps by exactly 2x or 1/2x (or not at all).
    pub fn rescale_to(&self, target: Arc<ModelTopology>) -> Result<Self, ScheduleError> {
        if !self.topology.same_block_structure(&target) {
            return Err(ScheduleError::TopologyMismatch(
                "block structure differs".into(),
            ));
        }
        let rescaled = self.rescale_to_steps(target.steps)?;
        Ok(Self {
            topology: target,
            bits: rescaled.bits,
        })
    }
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}
