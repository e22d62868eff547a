//! Built-in evaluator worker answering `quality = -cost_tmacs`, with fault
//! injection switches for exercising the pool.

use std::fs::OpenOptions;
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;

use super::protocol::{ErrorBody, EvalRequest, EvalResponse, Hello, PROTOCOL_VERSION};
use crate::costmodel::CostModel;
use crate::schedule::{CachingSchedule, ModelTopology};

#[derive(Debug, Clone)]
pub struct MockOptions {
    pub topology: Arc<ModelTopology>,
    /// Version announced in this worker's hello.
    pub protocol_version: u32,
    /// Exit without answering once this many requests have been answered.
    pub die_after: Option<usize>,
    /// Stop responding once this many requests have been answered.
    pub hang_after: Option<usize>,
    /// Emit a non-JSON line in place of the response after this many.
    pub malformed_after: Option<usize>,
    /// Send every response twice.
    pub duplicate: bool,
    /// When set, each fault fires only if this file can be newly created,
    /// so a respawned worker behaves.
    pub once_marker: Option<PathBuf>,
}

impl MockOptions {
    pub fn new(topology: Arc<ModelTopology>) -> Self {
        Self {
            topology,
            protocol_version: PROTOCOL_VERSION,
            die_after: None,
            hang_after: None,
            malformed_after: None,
            duplicate: false,
            once_marker: None,
        }
    }

    fn fires(&self, threshold: Option<usize>, answered: usize) -> bool {
        if threshold != Some(answered) {
            return false;
        }
        match &self.once_marker {
            None => true,
            Some(p) => OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(p)
                .is_ok(),
        }
    }
}

fn write_line(out: &mut impl Write, line: &str) -> io::Result<()> {
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()
}

fn error(request_id: u64, code: &str, message: impl Into<String>) -> EvalResponse {
    EvalResponse::Err {
        request_id,
        error: ErrorBody {
            code: code.into(),
            message: message.into(),
        },
    }
}

/// Serves the protocol until EOF. Returns the process exit code.
pub fn serve(opts: &MockOptions, input: impl BufRead, mut out: impl Write) -> io::Result<i32> {
    let cost = CostModel::new(opts.topology.clone());
    let topology_hash = opts.topology.hash();
    let mut lines = input.lines();
    let Some(first) = lines.next().transpose()? else {
        return Ok(0);
    };
    let peer = match Hello::parse(&first) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("mock-worker: bad handshake: {e}");
            return Ok(2);
        }
    };
    write_line(&mut out, &Hello::new(opts.protocol_version).to_line())?;
    if peer.protocol_version != opts.protocol_version {
        eprintln!(
            "mock-worker: peer speaks protocol {}, this worker {}",
            peer.protocol_version, opts.protocol_version
        );
        return Ok(3);
    }
    let mut answered = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if opts.fires(opts.die_after, answered) {
            return Ok(1);
        }
        if opts.fires(opts.hang_after, answered) {
            loop {
                std::thread::sleep(Duration::from_secs(3600));
            }
        }
        if opts.fires(opts.malformed_after, answered) {
            write_line(&mut out, "this is not json {")?;
            answered += 1;
            continue;
        }
        let resp = match serde_json::from_str::<EvalRequest>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<Value>(&line)
                    .ok()
                    .and_then(|v| v.get("request_id").and_then(Value::as_u64))
                    .unwrap_or(0);
                error(id, "bad_request", e.to_string())
            }
            Ok(req) if req.topology_hash != topology_hash => error(
                req.request_id,
                "topology_mismatch",
                format!(
                    "expected topology {topology_hash}, got {}",
                    req.topology_hash
                ),
            ),
            Ok(req) => match CachingSchedule::from_base64(opts.topology.clone(), &req.bits)
                .map_err(|e| e.to_string())
                .and_then(|s| cost.total_tmacs(&s).map_err(|e| e.to_string()))
            {
                Ok(tmacs) => EvalResponse::Ok {
                    request_id: req.request_id,
                    quality: -tmacs,
                    detail: None,
                },
                Err(e) => error(req.request_id, "bad_request", e),
            },
        };
        let text = resp.to_line();
        write_line(&mut out, &text)?;
        if opts.duplicate {
            write_line(&mut out, &text)?;
        }
        answered += 1;
    }
    Ok(0)
}
