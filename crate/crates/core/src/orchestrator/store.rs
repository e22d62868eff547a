use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{OrchestratorError, RunManifest};
use crate::nsga2::{CandidateRecord, GenerationRecord, RunHistory};
use crate::schedule::{CachingSchedule, ModelTopology, ScheduleError, FORMAT_VERSION};

const MANIFEST: &str = "manifest.json";
const TOPOLOGY: &str = "topology.json";
const SEEDS: &str = "seeds.json";
const INITIAL: &str = "initial.json";
const HISTORY: &str = "history.jsonl";
const TIMING: &str = "timing.jsonl";

/// A population file is a JSON array of schedule documents.
pub fn population_to_json(schedules: &[CachingSchedule]) -> String {
    let docs: Vec<Value> = schedules
        .iter()
        .map(|s| serde_json::from_str(&s.to_json()).expect("schedule json"))
        .collect();
    serde_json::to_string_pretty(&docs).expect("population serializes")
}

pub fn population_from_json(
    text: &str,
    topology: &Arc<ModelTopology>,
) -> Result<Vec<CachingSchedule>, ScheduleError> {
    let docs: Vec<Value> = serde_json::from_str(text)
        .map_err(|e| ScheduleError::Malformed(format!("population file: {e}")))?;
    docs.iter()
        .map(|d| CachingSchedule::from_json(&d.to_string(), topology.clone()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct InitialDoc {
    format_version: u32,
    candidates: Vec<CandidateRecord>,
}

#[derive(Serialize)]
struct TimingLine {
    generation: usize,
    wall_ms: f64,
}

/// On-disk layout of one run: manifest, topology, seed population, the
/// evaluated initial population, and the generation log.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    /// Starts a fresh run directory. Refuses to overwrite an existing run.
    pub fn create(
        dir: impl Into<PathBuf>,
        manifest: &RunManifest,
        topology: &ModelTopology,
        seeds: &[CachingSchedule],
    ) -> Result<Self, OrchestratorError> {
        let store = Self { dir: dir.into() };
        if store.path(MANIFEST).exists() {
            return Err(OrchestratorError::RunExists(
                store.dir.display().to_string(),
            ));
        }
        fs::create_dir_all(&store.dir).map_err(|e| OrchestratorError::io(&store.dir, e))?;
        store.write(TOPOLOGY, &topology.to_json())?;
        store.write(SEEDS, &population_to_json(seeds))?;
        // Written last: its presence marks a complete run directory.
        store.write(MANIFEST, &manifest.to_json())?;
        Ok(store)
    }

    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, OrchestratorError> {
        let store = Self { dir: dir.into() };
        let p = store.path(MANIFEST);
        if !p.exists() {
            return Err(OrchestratorError::io(
                &p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no run manifest"),
            ));
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn history_path(&self) -> PathBuf {
        self.path(HISTORY)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<(), OrchestratorError> {
        let p = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, text).map_err(|e| OrchestratorError::io(&tmp, e))?;
        fs::rename(&tmp, &p).map_err(|e| OrchestratorError::io(&p, e))
    }

    fn read(&self, name: &str) -> Result<String, OrchestratorError> {
        let p = self.path(name);
        fs::read_to_string(&p).map_err(|e| OrchestratorError::io(&p, e))
    }

    fn corrupt(name: &str, message: impl Into<String>) -> OrchestratorError {
        OrchestratorError::Corrupt {
            file: name.to_string(),
            message: message.into(),
        }
    }

    pub fn manifest(&self) -> Result<RunManifest, OrchestratorError> {
        serde_json::from_str(&self.read(MANIFEST)?)
            .map_err(|e| Self::corrupt(MANIFEST, e.to_string()))
    }

    pub fn topology(&self) -> Result<Arc<ModelTopology>, OrchestratorError> {
        let text = self.read(TOPOLOGY)?;
        ModelTopology::from_json(&text)
            .map(Arc::new)
            .map_err(|e| Self::corrupt(TOPOLOGY, e.to_string()))
    }

    pub fn seeds(
        &self,
        topology: &Arc<ModelTopology>,
    ) -> Result<Vec<CachingSchedule>, OrchestratorError> {
        population_from_json(&self.read(SEEDS)?, topology)
            .map_err(|e| Self::corrupt(SEEDS, e.to_string()))
    }

    pub fn initial(&self) -> Result<Option<Vec<CandidateRecord>>, OrchestratorError> {
        if !self.path(INITIAL).exists() {
            return Ok(None);
        }
        let doc: InitialDoc = serde_json::from_str(&self.read(INITIAL)?)
            .map_err(|e| Self::corrupt(INITIAL, e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Self::corrupt(
                INITIAL,
                format!("unsupported format_version {}", doc.format_version),
            ));
        }
        Ok(Some(doc.candidates))
    }

    pub fn write_initial(&self, candidates: &[CandidateRecord]) -> Result<(), OrchestratorError> {
        let doc = InitialDoc {
            format_version: FORMAT_VERSION,
            candidates: candidates.to_vec(),
        };
        self.write(
            INITIAL,
            &serde_json::to_string(&doc).expect("initial serializes"),
        )
    }

    /// Parses the generation log. Any unparsable or unterminated line, or a
    /// gap in generation numbers, is reported as corruption; the file itself
    /// is never modified here.
    pub fn history(&self) -> Result<Vec<GenerationRecord>, OrchestratorError> {
        let p = self.path(HISTORY);
        if !p.exists() {
            return Ok(Vec::new());
        }
        let text = self.read(HISTORY)?;
        if !text.is_empty() && !text.ends_with('\n') {
            let n = text.lines().count();
            return Err(Self::corrupt(HISTORY, format!("line {n} is truncated")));
        }
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let r: GenerationRecord = serde_json::from_str(line)
                .map_err(|e| Self::corrupt(HISTORY, format!("line {}: {e}", i + 1)))?;
            if r.format_version != FORMAT_VERSION {
                return Err(Self::corrupt(
                    HISTORY,
                    format!(
                        "line {}: unsupported format_version {}",
                        i + 1,
                        r.format_version
                    ),
                ));
            }
            if r.generation != i + 1 {
                return Err(Self::corrupt(
                    HISTORY,
                    format!(
                        "line {} holds generation {}, expected {}",
                        i + 1,
                        r.generation,
                        i + 1
                    ),
                ));
            }
            records.push(r);
        }
        Ok(records)
    }

    pub fn append(
        &self,
        record: &GenerationRecord,
        wall: Duration,
    ) -> Result<(), OrchestratorError> {
        let line = serde_json::to_string(record).expect("record serializes");
        append_line(&self.path(HISTORY), &line)?;
        let timing = TimingLine {
            generation: record.generation,
            wall_ms: wall.as_secs_f64() * 1e3,
        };
        append_line(
            &self.path(TIMING),
            &serde_json::to_string(&timing).expect("timing"),
        )
    }

    /// Initial population plus every logged generation.
    pub fn load_history(&self) -> Result<RunHistory, OrchestratorError> {
        let initial = self.initial()?.ok_or_else(|| {
            Self::corrupt(
                INITIAL,
                "missing; the initial population was never evaluated",
            )
        })?;
        Ok(RunHistory {
            initial,
            records: self.history()?,
        })
    }
}

fn append_line(path: &Path, line: &str) -> Result<(), OrchestratorError> {
    let mut f: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| OrchestratorError::io(path, e))?;
    f.write_all(line.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .and_then(|_| f.sync_data())
        .map_err(|e| OrchestratorError::io(path, e))
}
