use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::protocol::{EvalParams, EvalRequest, EvalResponse, Hello, PROTOCOL_VERSION};
use crate::costmodel::CostModel;
use crate::digest::digest_u64;
use crate::evaluator::{EvalError, Evaluator};
use crate::nsga2::ObjectiveVector;
use crate::schedule::{CachingSchedule, ModelTopology};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("worker command is empty")]
    EmptyCommand,
    #[error("failed to spawn worker `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("worker {worker} speaks protocol version {got}, expected {expected}")]
    VersionMismatch {
        worker: usize,
        expected: u32,
        got: u32,
    },
    #[error("worker {worker} sent a bad handshake ({reason}): `{line}`")]
    BadHandshake {
        worker: usize,
        line: String,
        reason: String,
    },
    #[error("protocol error from worker {worker}, line {line_number} (request {request_id}): {reason}: `{line}`")]
    Malformed {
        worker: usize,
        request_id: u64,
        line_number: usize,
        line: String,
        reason: String,
    },
    #[error("request {request_id} rejected by worker: [{code}] {message}")]
    Remote {
        request_id: u64,
        code: String,
        message: String,
    },
    #[error("request {request_id} failed after {attempts} attempts: {last}")]
    Exhausted {
        request_id: u64,
        attempts: usize,
        last: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    pub command: Vec<String>,
    pub workers: usize,
    pub timeout: Duration,
    pub max_retries: usize,
}

enum Fault {
    Retry(String),
    Fatal(PoolError),
}

enum Wait {
    Line(String),
    Eof,
    Timeout,
}

struct Worker {
    id: usize,
    child: Child,
    stdin: ChildStdin,
    rx: Receiver<Option<String>>,
    lines: usize,
}

impl Worker {
    fn spawn(id: usize, config: &PoolConfig) -> Result<Self, Fault> {
        let (program, args) = config
            .command
            .split_first()
            .ok_or(Fault::Fatal(PoolError::EmptyCommand))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| {
                Fault::Fatal(PoolError::Spawn {
                    command: config.command.join(" "),
                    source,
                })
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            let mut buf = Vec::new();
            loop {
                buf.clear();
                match reader.read_until(b'\n', &mut buf) {
                    Ok(0) | Err(_) => {
                        let _ = tx.send(None);
                        return;
                    }
                    Ok(_) => {
                        let line = String::from_utf8_lossy(&buf)
                            .trim_end_matches(['\n', '\r'])
                            .to_string();
                        if tx.send(Some(line)).is_err() {
                            return;
                        }
                    }
                }
            }
        });
        let mut w = Self {
            id,
            child,
            stdin,
            rx,
            lines: 0,
        };
        w.handshake(config.timeout)?;
        Ok(w)
    }

    fn handshake(&mut self, timeout: Duration) -> Result<(), Fault> {
        self.send(&Hello::new(PROTOCOL_VERSION).to_line())
            .map_err(|e| Fault::Retry(format!("handshake write failed: {e}")))?;
        match self.recv(Instant::now() + timeout) {
            Wait::Line(line) => {
                let hello = Hello::parse(&line).map_err(|reason| {
                    Fault::Fatal(PoolError::BadHandshake {
                        worker: self.id,
                        line: line.clone(),
                        reason,
                    })
                })?;
                if hello.protocol_version != PROTOCOL_VERSION {
                    return Err(Fault::Fatal(PoolError::VersionMismatch {
                        worker: self.id,
                        expected: PROTOCOL_VERSION,
                        got: hello.protocol_version,
                    }));
                }
                Ok(())
            }
            Wait::Eof => Err(Fault::Retry("worker exited during handshake".into())),
            Wait::Timeout => Err(Fault::Retry("handshake timed out".into())),
        }
    }

    fn send(&mut self, line: &str) -> std::io::Result<()> {
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()
    }

    fn recv(&mut self, deadline: Instant) -> Wait {
        let left = deadline.saturating_duration_since(Instant::now());
        match self.rx.recv_timeout(left) {
            Ok(Some(line)) => {
                self.lines += 1;
                Wait::Line(line)
            }
            Ok(None) | Err(RecvTimeoutError::Disconnected) => Wait::Eof,
            Err(RecvTimeoutError::Timeout) => Wait::Timeout,
        }
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    fn shutdown(mut self) {
        drop(self.stdin);
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

struct Job {
    index: usize,
    request: EvalRequest,
    attempts: usize,
}

struct Batch {
    queue: Mutex<VecDeque<Job>>,
    results: Mutex<Vec<Option<f64>>>,
    failure: Mutex<Option<PoolError>>,
    abort: AtomicBool,
}

impl Batch {
    fn fail(&self, e: PoolError) {
        self.abort.store(true, Ordering::SeqCst);
        self.failure.lock().unwrap().get_or_insert(e);
    }
}

/// Persistent evaluator processes. Workers are spawned lazily, respawned
/// after a timeout or exit, and shut down when the pool is dropped.
pub struct WorkerPool {
    config: PoolConfig,
    slots: Mutex<Vec<Option<Worker>>>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("config", &self.config)
            .finish()
    }
}

impl WorkerPool {
    pub fn new(config: PoolConfig) -> Result<Self, PoolError> {
        if config.command.is_empty() {
            return Err(PoolError::EmptyCommand);
        }
        let slots = (0..config.workers.max(1)).map(|_| None).collect();
        Ok(Self {
            config,
            slots: Mutex::new(slots),
        })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    /// Answers every request exactly once, in request order, or fails the
    /// whole batch with the first fatal error.
    pub fn evaluate(&self, requests: Vec<EvalRequest>) -> Result<Vec<f64>, PoolError> {
        let n = requests.len();
        let batch = Batch {
            queue: Mutex::new(
                requests
                    .into_iter()
                    .enumerate()
                    .map(|(index, request)| Job {
                        index,
                        request,
                        attempts: 0,
                    })
                    .collect(),
            ),
            results: Mutex::new(vec![None; n]),
            failure: Mutex::new(None),
            abort: AtomicBool::new(false),
        };
        let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        thread::scope(|s| {
            for (id, slot) in slots.iter_mut().enumerate().take(n.max(1)) {
                let batch = &batch;
                s.spawn(move || self.drive(id, slot, batch));
            }
        });
        if let Some(e) = batch.failure.into_inner().unwrap() {
            return Err(e);
        }
        Ok(batch
            .results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.expect("every request answered"))
            .collect())
    }

    fn drive(&self, id: usize, slot: &mut Option<Worker>, batch: &Batch) {
        while !batch.abort.load(Ordering::SeqCst) {
            let Some(mut job) = batch.queue.lock().unwrap().pop_front() else {
                return;
            };
            match self.attempt(id, slot, &job) {
                Ok(q) => batch.results.lock().unwrap()[job.index] = Some(q),
                Err(Fault::Fatal(e)) => {
                    batch.fail(e);
                    return;
                }
                Err(Fault::Retry(reason)) => {
                    if let Some(w) = slot.take() {
                        w.kill();
                    }
                    job.attempts += 1;
                    log::warn!(
                        "worker {id}: request {} attempt {} failed: {reason}",
                        job.request.request_id,
                        job.attempts
                    );
                    if job.attempts > self.config.max_retries {
                        batch.fail(PoolError::Exhausted {
                            request_id: job.request.request_id,
                            attempts: job.attempts,
                            last: reason,
                        });
                        return;
                    }
                    batch.queue.lock().unwrap().push_front(job);
                }
            }
        }
    }

    fn attempt(&self, id: usize, slot: &mut Option<Worker>, job: &Job) -> Result<f64, Fault> {
        if slot.is_none() {
            *slot = Some(Worker::spawn(id, &self.config)?);
        }
        let w = slot.as_mut().unwrap();
        let rid = job.request.request_id;
        w.send(&job.request.to_line())
            .map_err(|e| Fault::Retry(format!("write failed: {e}")))?;
        let deadline = Instant::now() + self.config.timeout;
        loop {
            match w.recv(deadline) {
                Wait::Timeout => {
                    return Err(Fault::Retry(format!(
                        "no response within {:.3}s",
                        self.config.timeout.as_secs_f64()
                    )))
                }
                Wait::Eof => return Err(Fault::Retry("worker exited".into())),
                Wait::Line(line) => match EvalResponse::parse(&line) {
                    Err(reason) => {
                        let e = PoolError::Malformed {
                            worker: id,
                            request_id: rid,
                            line_number: w.lines,
                            line,
                            reason,
                        };
                        if let Some(w) = slot.take() {
                            w.kill();
                        }
                        return Err(Fault::Fatal(e));
                    }
                    Ok(resp) if resp.request_id() != rid => {
                        log::warn!(
                            "worker {id}: ignoring response for request {} while waiting for {rid}",
                            resp.request_id()
                        );
                    }
                    Ok(EvalResponse::Ok { quality, .. }) => return Ok(quality),
                    Ok(EvalResponse::Err { error, .. }) => {
                        return Err(Fault::Fatal(PoolError::Remote {
                            request_id: rid,
                            code: error.code,
                            message: error.message,
                        }))
                    }
                },
            }
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        let slots = self.slots.get_mut().unwrap_or_else(|e| e.into_inner());
        for w in slots.iter_mut().filter_map(Option::take) {
            w.shutdown();
        }
    }
}

/// Costs schedules locally and asks external workers for quality.
#[derive(Debug)]
pub struct ExternalEvaluator {
    pool: WorkerPool,
    cost: CostModel,
    topology_hash: String,
    prompt_set: String,
    images_per_prompt: u32,
    run_seed: u64,
    next_id: AtomicU64,
}

impl ExternalEvaluator {
    pub fn new(
        pool: WorkerPool,
        topology: Arc<ModelTopology>,
        prompt_set: impl Into<String>,
        images_per_prompt: u32,
        run_seed: u64,
    ) -> Self {
        Self {
            pool,
            topology_hash: topology.hash(),
            cost: CostModel::new(topology),
            prompt_set: prompt_set.into(),
            images_per_prompt,
            run_seed,
            next_id: AtomicU64::new(1),
        }
    }

    /// Per-candidate evaluation seed from the run seed and schedule hash, so
    /// results do not depend on dispatch order.
    pub fn candidate_seed(run_seed: u64, schedule_hash: &str) -> u64 {
        let mut buf = run_seed.to_le_bytes().to_vec();
        buf.extend(schedule_hash.as_bytes());
        digest_u64(&buf)
    }

    pub fn request_for(&self, schedule: &CachingSchedule) -> EvalRequest {
        EvalRequest {
            protocol_version: PROTOCOL_VERSION,
            request_id: self.next_id.fetch_add(1, Ordering::Relaxed),
            topology_hash: self.topology_hash.clone(),
            bits: schedule.to_base64(),
            eval_params: EvalParams {
                prompt_set: self.prompt_set.clone(),
                images_per_prompt: self.images_per_prompt,
                seed: Self::candidate_seed(self.run_seed, &schedule.hash()),
            },
        }
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, schedules: &[CachingSchedule]) -> Result<Vec<ObjectiveVector>, EvalError> {
        let costs = schedules
            .iter()
            .map(|s| self.cost.total_tmacs(s))
            .collect::<Result<Vec<_>, _>>()?;
        let requests = schedules.iter().map(|s| self.request_for(s)).collect();
        let qualities = self
            .pool
            .evaluate(requests)
            .map_err(|e| EvalError::Backend(Box::new(e)))?;
        // Wire quality is higher-is-better; the engine minimizes loss.
        Ok(costs
            .into_iter()
            .zip(qualities)
            .map(|(c, q)| ObjectiveVector::new(c, -q))
            .collect())
    }
}
