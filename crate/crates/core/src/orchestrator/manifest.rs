use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::nsga2::GaParams;
use crate::rng::RNG_ALGORITHM;
use crate::schedule::{ModelTopology, FORMAT_VERSION};
use crate::seeding::StrategyMix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyRef {
    pub name: String,
    pub steps: usize,
    pub hash: String,
}

impl TopologyRef {
    pub fn of(topology: &ModelTopology) -> Self {
        Self {
            name: topology.name().to_string(),
            steps: topology.steps(),
            hash: topology.hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorDescriptor {
    Toy {
        seed: u64,
    },
    CostOnly,
    External {
        command: Vec<String>,
        prompt_set: String,
        images_per_prompt: u32,
        workers: usize,
        timeout_s: f64,
        max_retries: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeedingDescriptor {
    Mix { mix: StrategyMix },
    File { path: String, sha256: String },
}

/// Everything that determines a run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub code_version: String,
    pub rng_algorithm: String,
    pub topology: TopologyRef,
    pub params: GaParams,
    pub evaluator: EvaluatorDescriptor,
    pub seeding: SeedingDescriptor,
}

/// Fields that may differ between a run and its resumption: the generation
/// target, and external-pool knobs that do not change results.
const RESUME_FREE: &[&str] = &[
    "params.generations",
    "evaluator.workers",
    "evaluator.timeout_s",
    "evaluator.max_retries",
];

impl RunManifest {
    pub fn new(
        topology: &ModelTopology,
        params: GaParams,
        evaluator: EvaluatorDescriptor,
        seeding: SeedingDescriptor,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            topology: TopologyRef::of(topology),
            params,
            evaluator,
            seeding,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Dotted paths of every result-relevant field that differs.
    pub fn differences(&self, other: &RunManifest) -> Vec<String> {
        let a = serde_json::to_value(self).expect("manifest serializes");
        let b = serde_json::to_value(other).expect("manifest serializes");
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out.retain(|p| !RESUME_FREE.contains(&p.as_str()));
        out
    }
}

fn diff_values(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => diff_values(&p, va, vb, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}
