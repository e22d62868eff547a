use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ecad::orchestrator::protocol::{
    EvalParams, EvalRequest, EvalResponse, Hello, PROTOCOL_VERSION,
};
use ecad::orchestrator::{ExternalEvaluator, PoolConfig, PoolError, WorkerPool};
use ecad::seeding::fora_schedule;
use ecad::{CachingSchedule, CostModel, ModelTopology};

fn toy() -> Arc<ModelTopology> {
    Arc::new(ModelTopology::builtin("toy").unwrap())
}

fn worker(extra: &[&str]) -> Vec<String> {
    let mut cmd = vec![
        env!("CARGO_BIN_EXE_ecad").to_string(),
        "mock-worker".into(),
        "--topology".into(),
        "toy".into(),
    ];
    cmd.extend(extra.iter().map(|s| s.to_string()));
    cmd
}

fn pool(command: Vec<String>, workers: usize, timeout_ms: u64, max_retries: usize) -> WorkerPool {
    WorkerPool::new(PoolConfig {
        command,
        workers,
        timeout: Duration::from_millis(timeout_ms),
        max_retries,
    })
    .unwrap()
}

fn schedules() -> Vec<CachingSchedule> {
    let t = toy();
    (1..=10).map(|i| fora_schedule(&t, i).unwrap()).collect()
}

fn requests(hash: &str, schedules: &[CachingSchedule]) -> Vec<EvalRequest> {
    schedules
        .iter()
        .enumerate()
        .map(|(i, s)| EvalRequest {
            protocol_version: PROTOCOL_VERSION,
            request_id: 100 + i as u64,
            topology_hash: hash.to_string(),
            bits: s.to_base64(),
            eval_params: EvalParams {
                prompt_set: "calibration".into(),
                images_per_prompt: 1,
                seed: i as u64,
            },
        })
        .collect()
}

/// Quality the mock reports: negated cost.
fn expected(schedules: &[CachingSchedule]) -> Vec<f64> {
    let m = CostModel::new(toy());
    schedules
        .iter()
        .map(|s| -m.total_tmacs(s).unwrap())
        .collect()
}

#[test]
fn mock_transcript_matches_the_wire_format() {
    let t = toy();
    let mut child = Command::new(env!("CARGO_BIN_EXE_ecad"))
        .args(["mock-worker", "--topology", "toy"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    writeln!(stdin, "{}", Hello::new(PROTOCOL_VERSION).to_line()).unwrap();
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    assert_eq!(line, "{\"hello\":\"ecad-eval\",\"protocol_version\":1}\n");

    let s = schedules();
    let req = &requests(&t.hash(), &s[1..2])[0];
    writeln!(stdin, "{}", req.to_line()).unwrap();
    line.clear();
    out.read_line(&mut line).unwrap();
    match EvalResponse::parse(line.trim_end()).unwrap() {
        EvalResponse::Ok {
            request_id,
            quality,
            ..
        } => {
            assert_eq!(request_id, req.request_id);
            assert_eq!(quality, expected(&s[1..2])[0]);
        }
        other => panic!("{other:?}"),
    }

    writeln!(stdin, "{{\"request_id\":5}}").unwrap();
    line.clear();
    out.read_line(&mut line).unwrap();
    match EvalResponse::parse(line.trim_end()).unwrap() {
        EvalResponse::Err { error, .. } => assert_eq!(error.code, "bad_request"),
        other => panic!("{other:?}"),
    }
    drop(stdin);
    assert!(child.wait().unwrap().success());
}

#[test]
fn results_come_back_in_request_order() {
    let s = schedules();
    let p = pool(worker(&[]), 3, 10_000, 0);
    assert_eq!(
        p.evaluate(requests(&toy().hash(), &s)).unwrap(),
        expected(&s)
    );
    // Workers are reused across batches.
    assert_eq!(
        p.evaluate(requests(&toy().hash(), &s)).unwrap(),
        expected(&s)
    );
}

#[test]
fn duplicate_responses_are_ignored() {
    let s = schedules();
    let p = pool(worker(&["--duplicate"]), 2, 10_000, 0);
    assert_eq!(
        p.evaluate(requests(&toy().hash(), &s)).unwrap(),
        expected(&s)
    );
}

#[test]
fn topology_mismatch_is_a_typed_remote_error() {
    let s = schedules();
    let p = pool(worker(&[]), 1, 10_000, 3);
    match p.evaluate(requests("0000000000000000", &s)) {
        Err(PoolError::Remote { code, .. }) => assert_eq!(code, "topology_mismatch"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn worker_killed_mid_batch_is_respawned() {
    let tmp = tempfile::tempdir().unwrap();
    let marker = tmp.path().join("m");
    let s = schedules();
    let p = pool(
        worker(&[
            "--die-after",
            "3",
            "--once-marker",
            marker.to_str().unwrap(),
        ]),
        2,
        10_000,
        1,
    );
    assert_eq!(
        p.evaluate(requests(&toy().hash(), &s)).unwrap(),
        expected(&s)
    );
    assert!(marker.exists());
}

#[test]
fn hung_worker_times_out_and_is_replaced() {
    let tmp = tempfile::tempdir().unwrap();
    let marker = tmp.path().join("m");
    let s = schedules();
    let p = pool(
        worker(&[
            "--hang-after",
            "2",
            "--once-marker",
            marker.to_str().unwrap(),
        ]),
        1,
        500,
        1,
    );
    let start = Instant::now();
    assert_eq!(
        p.evaluate(requests(&toy().hash(), &s)).unwrap(),
        expected(&s)
    );
    assert!(start.elapsed() >= Duration::from_millis(500));
}

#[test]
fn persistent_failure_exhausts_retries() {
    let s = schedules();
    let p = pool(worker(&["--die-after", "0"]), 1, 5_000, 2);
    match p.evaluate(requests(&toy().hash(), &s)) {
        Err(PoolError::Exhausted { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_line_is_fatal_and_reports_the_line() {
    let s = schedules();
    let p = pool(worker(&["--malformed-after", "2"]), 1, 5_000, 3);
    match p.evaluate(requests(&toy().hash(), &s)) {
        Err(PoolError::Malformed {
            line_number, line, ..
        }) => {
            assert!(line_number >= 2);
            assert!(!line.is_empty());
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn version_mismatch_and_bad_handshake_are_typed() {
    let s = schedules();
    let p = pool(worker(&["--protocol-version", "7"]), 1, 5_000, 3);
    match p.evaluate(requests(&toy().hash(), &s)) {
        Err(PoolError::VersionMismatch { expected, got, .. }) => {
            assert_eq!((expected, got), (PROTOCOL_VERSION, 7))
        }
        other => panic!("{other:?}"),
    }
    let p = pool(
        vec!["sh".into(), "-c".into(), "echo not-a-hello; cat".into()],
        1,
        5_000,
        3,
    );
    assert!(matches!(
        p.evaluate(requests(&toy().hash(), &s)),
        Err(PoolError::BadHandshake { .. })
    ));
    assert!(matches!(
        WorkerPool::new(PoolConfig {
            command: vec![],
            workers: 1,
            timeout: Duration::from_secs(1),
            max_retries: 0,
        }),
        Err(PoolError::EmptyCommand)
    ));
}

#[test]
fn candidate_seed_depends_only_on_run_seed_and_schedule() {
    let t = toy();
    let s = fora_schedule(&t, 3).unwrap();
    let e = ExternalEvaluator::new(pool(worker(&[]), 1, 1_000, 0), t.clone(), "p", 2, 42);
    let (a, b) = (e.request_for(&s), e.request_for(&s));
    assert_ne!(a.request_id, b.request_id);
    assert_eq!(a.eval_params, b.eval_params);
    assert_eq!(
        a.eval_params.seed,
        ExternalEvaluator::candidate_seed(42, &s.hash())
    );
    assert_ne!(
        ExternalEvaluator::candidate_seed(43, &s.hash()),
        a.eval_params.seed
    );
}
