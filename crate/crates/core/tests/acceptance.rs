//! Acceptance suite: one line per criterion, non-zero exit on any failure.

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ecad::costmodel::normalized_latency;
use ecad::evaluator::EvalError;
use ecad::exec::ExecMode;
use ecad::nsga2::{self, dominates, mutate_bit_flip, non_dominated_sort, RunHistory};
use ecad::orchestrator::{
    execute, hypervolume_progression, overall_frontier, pareto_filter, EvaluatorDescriptor,
    ExternalEvaluator, FrontierPoint, PoolConfig, PoolError, RunManifest, RunStore,
    SeedingDescriptor, WorkerPool,
};
use ecad::rng::{stream, RunRng};
use ecad::seeding::diophantine::solve_two_var_diophantine;
use ecad::seeding::{
    build_initial_population, fora_schedule, true_random_schedule, uniform_random_sample,
    StrategyMix,
};
use ecad::toydit::ToyEvaluator;
use ecad::{CachingSchedule, CostModel, Evaluator, GaParams, ModelTopology, ObjectiveVector};
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn topo(name: &str) -> Arc<ModelTopology> {
    Arc::new(ModelTopology::builtin(name).unwrap())
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want
}

fn cost_model() -> Check {
    let start = Instant::now();
    let t = topo("pixart-like");
    let m = CostModel::new(t.clone());
    let full = m
        .total_tmacs(&CachingSchedule::new_full_recompute(t.clone()))
        .unwrap();
    let f2 = m.total_tmacs(&fora_schedule(&t, 2).unwrap()).unwrap();
    let f3 = m.total_tmacs(&fora_schedule(&t, 3).unwrap()).unwrap();
    let elapsed = start.elapsed();
    ensure(rel_err(full, 5.71) <= 0.005, || format!("full {full}"))?;
    ensure(rel_err(f2, 2.87) <= 0.01, || format!("fora2 {f2}"))?;
    ensure(rel_err(f3, 2.02) <= 0.01, || format!("fora3 {f3}"))?;
    ensure(elapsed < Duration::from_secs(1), || format!("{elapsed:?}"))?;
    Ok(format!(
        "full {full:.4}, fora2 {f2:.4}, fora3 {f3:.4} TMACs in {elapsed:?}"
    ))
}

fn latency_normalization() -> Check {
    let a = normalized_latency(519.258, 948.688, 165.736).unwrap();
    let b = normalized_latency(403.989, 948.688, 165.736).unwrap();
    ensure((a - 90.715).abs() <= 0.01, || format!("row 1: {a}"))?;
    ensure((b - 70.577).abs() <= 0.01, || format!("row 2: {b}"))?;
    Ok(format!("{a:.3} ms, {b:.3} ms"))
}

/// Ranks by repeated removal of the undominated set.
fn brute_ranks(objs: &[ObjectiveVector]) -> Vec<usize> {
    let mut rank = vec![usize::MAX; objs.len()];
    let mut level = 0;
    while rank.contains(&usize::MAX) {
        let open: Vec<usize> = (0..objs.len()).filter(|&i| rank[i] == usize::MAX).collect();
        let front: Vec<usize> = open
            .iter()
            .copied()
            .filter(|&i| !open.iter().any(|&j| dominates(&objs[j], &objs[i])))
            .collect();
        for i in front {
            rank[i] = level;
        }
        level += 1;
    }
    rank
}

/// Undominated hashes; among equal objectives only the smallest hash.
fn brute_frontier(points: &[FrontierPoint]) -> BTreeSet<String> {
    let obj = |p: &FrontierPoint| ObjectiveVector::new(p.cost_tmacs, p.quality_loss);
    points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(&obj(q), &obj(p))))
        .filter(|p| {
            !points.iter().any(|q| {
                q.cost_tmacs == p.cost_tmacs
                    && q.quality_loss == p.quality_loss
                    && q.schedule_hash < p.schedule_hash
            })
        })
        .map(|p| p.schedule_hash.clone())
        .collect()
}

fn sorting_oracles() -> Check {
    let mut rng = RunRng::new(11, stream::ENGINE);
    let mut mismatches = 0;
    for trial in 0..100 {
        let n = rng.gen_range(1..=64);
        // A coarse grid forces ties and duplicates.
        let grid = if trial % 2 == 0 { 8 } else { 1000 };
        let objs: Vec<ObjectiveVector> = (0..n)
            .map(|_| {
                ObjectiveVector::new(rng.gen_range(0..grid) as f64, rng.gen_range(0..grid) as f64)
            })
            .collect();
        let part = non_dominated_sort(&objs);
        if part.ranks != brute_ranks(&objs) {
            mismatches += 1;
        }
        let points: Vec<FrontierPoint> = objs
            .iter()
            .enumerate()
            .map(|(i, o)| FrontierPoint {
                schedule_hash: format!("{i:04}"),
                bits: String::new(),
                cost_tmacs: o.cost_tmacs,
                quality_loss: o.quality_loss,
                cached_fraction: 0.0,
                generation: 0,
            })
            .collect();
        let got: BTreeSet<String> = pareto_filter(points.clone())
            .points
            .into_iter()
            .map(|p| p.schedule_hash)
            .collect();
        if got != brute_frontier(&points) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} mismatches"))?;
    Ok("100 populations, 0 mismatches".into())
}

fn mutation_statistics() -> Check {
    let t = topo("toy");
    ensure(t.total_cells() == 360, || "toy is not 360 cells".into())?;
    let per_bit = 1.0 / t.total_cells() as f64;
    let mut rng = RunRng::new(5, stream::ENGINE);
    let parent = CachingSchedule::new_full_recompute(t.clone());
    const N: usize = 100_000;

    let flips: usize = (0..N)
        .map(|_| mutate_bit_flip(&parent, 1.0, per_bit, &mut rng).flipped)
        .sum();
    let mean = flips as f64 / N as f64;
    ensure((0.95..=1.05).contains(&mean), || {
        format!("mean flips {mean}")
    })?;

    let p = 0.05;
    let applied = (0..N)
        .filter(|_| mutate_bit_flip(&parent, p, per_bit, &mut rng).applied)
        .count();
    let expect = N as f64 * p;
    let sigma = (N as f64 * p * (1.0 - p)).sqrt();
    ensure((applied as f64 - expect).abs() <= 3.0 * sigma, || {
        format!(
            "applied {applied}, expected {expect} +/- {:.0}",
            3.0 * sigma
        )
    })?;
    Ok(format!(
        "mean flips {mean:.4}; applied {applied}/{N} (band {:.0}..{:.0})",
        expect - 3.0 * sigma,
        expect + 3.0 * sigma
    ))
}

fn rescale_identity() -> Check {
    let t = topo("pixart-like");
    let mut rng = RunRng::new(3, stream::SEEDING);
    for i in 0..1000 {
        let p = rng.gen_range(0.0..=1.0);
        let s = if i % 2 == 0 {
            true_random_schedule(&t, p, &mut rng).unwrap()
        } else {
            uniform_random_sample(&t, &mut rng).schedule
        };
        let back = s.upscale_steps().downscale_steps().unwrap();
        ensure(back == s, || format!("schedule {i} ({}) changed", s.hash()))?;
    }
    Ok("1000 schedules bit-exact".into())
}

fn diophantine() -> Check {
    let mut combos = 0u64;
    for w1 in 1..=200u64 {
        for w2 in 1..=200u64 {
            for target in 0..=200u64 {
                let (cap1, cap2) = (target / w1, target / w2);
                let want: Vec<(u64, u64)> = (0..=cap1)
                    .filter(|k1| (target - w1 * k1) % w2 == 0)
                    .map(|k1| (k1, (target - w1 * k1) / w2))
                    .collect();
                let mut got: Vec<(u64, u64)> =
                    solve_two_var_diophantine(w1, w2, target, cap1, cap2)
                        .iter()
                        .collect();
                got.sort_unstable();
                ensure(got == want, || {
                    format!("{w1}*a + {w2}*b = {target}: got {got:?}, want {want:?}")
                })?;
                combos += 1;
            }
        }
    }

    let t = topo("pixart-like");
    let model = CostModel::new(t.clone());
    let max_w = (0..t.cells_per_step())
        .map(|i| model.cell_weight_mmacs(i))
        .max()
        .unwrap();
    let mut rng = RunRng::new(17, stream::SEEDING);
    let mut uniform = Vec::with_capacity(10_000);
    let mut random = Vec::with_capacity(10_000);
    for i in 0..10_000 {
        let s = uniform_random_sample(&t, &mut rng);
        ensure(s.achieved_mmacs.abs_diff(s.snapped_mmacs) <= max_w, || {
            format!(
                "sample {i}: achieved {} vs snapped {}",
                s.achieved_mmacs, s.snapped_mmacs
            )
        })?;
        ensure(
            model.block_mmacs(&s.schedule).unwrap() == s.achieved_mmacs,
            || format!("sample {i}: schedule cost differs from solved target"),
        )?;
        uniform.push(model.total_tmacs(&s.schedule).unwrap());
        random.push(
            model
                .total_tmacs(&true_random_schedule(&t, 0.5, &mut rng).unwrap())
                .unwrap(),
        );
    }
    let cov = |xs: &[f64]| {
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        var.sqrt() / mean
    };
    let (cu, cr) = (cov(&uniform), cov(&random));
    ensure(cu >= 3.0 * cr, || {
        format!("CoV uniform {cu} vs random {cr}")
    })?;
    Ok(format!(
        "{combos} combos exact; 10^4 samples within {max_w} MMACs; CoV {cu:.4} vs {cr:.4} ({:.1}x)",
        cu / cr
    ))
}

fn toy_params() -> GaParams {
    GaParams {
        population_size: 24,
        generations: 40,
        rng_seed: 2024,
        ..GaParams::default()
    }
}

fn nearest_rank_percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let rank = ((q * xs.len() as f64).ceil() as usize).max(1);
    xs[rank - 1]
}

fn toy_run() -> Check {
    let t = topo("toy");
    let params = toy_params();
    let start = Instant::now();
    let mut rng = RunRng::new(params.rng_seed, stream::SEEDING);
    let initial = build_initial_population(
        &t,
        &StrategyMix::default_for(&t),
        params.population_size,
        &mut rng,
    )
    .unwrap();
    let eval = ToyEvaluator::for_topology(t.clone(), 0, ExecMode::Parallel).unwrap();
    let history = nsga2::run(initial, &eval, &params).unwrap();
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || {
        format!("{elapsed:?}")
    })?;

    let baseline = CostModel::new(t.clone())
        .total_tmacs(&CachingSchedule::new_full_recompute(t.clone()))
        .unwrap();
    let max_loss = history
        .initial
        .iter()
        .chain(history.records.iter().flat_map(|r| r.offspring.iter()))
        .map(|r| r.quality_loss)
        .fold(0.0, f64::max);
    let hv = hypervolume_progression(&history, &t, (baseline, max_loss)).unwrap();
    ensure(hv.len() == 41, || {
        format!("{} hypervolume points", hv.len())
    })?;
    let drops = hv.windows(2).filter(|w| w[1] < w[0]).count();
    let rises = hv.windows(2).filter(|w| w[1] > w[0]).count();
    ensure(drops == 0, || {
        format!("hypervolume decreased {drops} times")
    })?;
    ensure(rises >= 10, || format!("strict increases in {rises} of 40"))?;

    // Comparable cost: other initial candidates within 20% of the member's
    // cost, at least three of them. The member must come from the search.
    let frontier = overall_frontier(&history, &t).unwrap();
    let mut best = None;
    for p in frontier
        .points
        .iter()
        .filter(|p| p.generation >= 1 && p.cost_tmacs <= 0.7 * baseline)
    {
        let peers: Vec<f64> = history
            .initial
            .iter()
            .filter(|r| r.id != p.schedule_hash)
            .filter(|r| (r.cost_tmacs - p.cost_tmacs).abs() <= 0.2 * p.cost_tmacs)
            .map(|r| r.quality_loss)
            .collect();
        if peers.len() < 3 {
            continue;
        }
        let p10 = nearest_rank_percentile(peers.clone(), 0.1);
        if p.quality_loss <= p10 {
            best = Some((p.cost_tmacs, p.quality_loss, p10, peers.len()));
            break;
        }
    }
    let (cost, loss, p10, peers) = best.ok_or_else(|| {
        "no frontier schedule at <= 70% cost beats the initial 10th percentile".to_string()
    })?;
    Ok(format!(
        "{elapsed:.1?}; HV non-decreasing, {rises}/40 strict rises; \
         {cost:.3}/{baseline:.3} TMACs at loss {loss:.4} <= p10 {p10:.4} of {peers} initial peers"
    ))
}

fn toy_manifest(t: &ModelTopology, params: &GaParams) -> RunManifest {
    RunManifest::new(
        t,
        params.clone(),
        EvaluatorDescriptor::Toy { seed: 0 },
        SeedingDescriptor::Mix {
            mix: StrategyMix::default_for(t),
        },
    )
}

fn toy_seeds(t: &Arc<ModelTopology>, params: &GaParams) -> Vec<CachingSchedule> {
    let mut rng = RunRng::new(params.rng_seed, stream::SEEDING);
    build_initial_population(
        t,
        &StrategyMix::default_for(t),
        params.population_size,
        &mut rng,
    )
    .unwrap()
    .into_iter()
    .map(|c| c.schedule)
    .collect()
}

/// Runs to `stops` in turn, reopening the store before each leg.
fn stored_run(dir: &Path, stops: &[usize]) -> Vec<u8> {
    let t = topo("toy");
    let params = toy_params();
    RunStore::create(dir, &toy_manifest(&t, &params), &t, &toy_seeds(&t, &params)).unwrap();
    let eval = ToyEvaluator::for_topology(t.clone(), 0, ExecMode::Parallel).unwrap();
    for &g in stops {
        let store = RunStore::open(dir).unwrap();
        let leg = GaParams {
            generations: g,
            ..params.clone()
        };
        execute(&store, &leg, &eval, |_| {}).unwrap();
    }
    std::fs::read(dir.join("history.jsonl")).unwrap()
}

fn determinism_and_resume() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let a = stored_run(&tmp.path().join("a"), &[40]);
    let b = stored_run(&tmp.path().join("b"), &[40]);
    ensure(a == b, || "identical-seed runs differ".into())?;
    ensure(a.iter().filter(|&&c| c == b'\n').count() == 40, || {
        "history does not hold 40 generations".into()
    })?;
    for split in 0..40 {
        let r = stored_run(&tmp.path().join(format!("split{split}")), &[split, 40]);
        ensure(r == a, || {
            format!("resume after generation {split} diverged")
        })?;
    }
    Ok(format!(
        "two runs byte-identical ({} bytes); resume after each of generations 0..39 identical",
        a.len()
    ))
}

fn mock_pool(extra: &[&str], workers: usize, timeout: Duration) -> WorkerPool {
    let mut command = vec![
        env!("CARGO_BIN_EXE_ecad").to_string(),
        "mock-worker".into(),
        "--topology".into(),
        "toy".into(),
    ];
    command.extend(extra.iter().map(|s| s.to_string()));
    WorkerPool::new(PoolConfig {
        command,
        workers,
        timeout,
        max_retries: 2,
    })
    .unwrap()
}

fn external_history(extra: &[&str]) -> Result<RunHistory, String> {
    let t = topo("toy");
    let params = GaParams {
        population_size: 12,
        generations: 4,
        rng_seed: 9,
        ..GaParams::default()
    };
    let pool = mock_pool(extra, 3, Duration::from_secs(30));
    let eval = ExternalEvaluator::new(pool, t.clone(), "calibration", 1, params.rng_seed);
    let initial = toy_seeds(&t, &params)
        .into_iter()
        .map(nsga2::Candidate::seed)
        .collect();
    nsga2::run(initial, &eval, &params).map_err(|e| e.to_string())
}

fn pool_error(extra: &[&str]) -> Option<PoolError> {
    let t = topo("toy");
    let eval = ExternalEvaluator::new(
        mock_pool(extra, 1, Duration::from_secs(30)),
        t.clone(),
        "calibration",
        1,
        0,
    );
    let batch: Vec<CachingSchedule> = (1..=4).map(|i| fora_schedule(&t, i).unwrap()).collect();
    match eval.evaluate(&batch) {
        Err(EvalError::Backend(e)) => e.downcast::<PoolError>().ok().map(|b| *b),
        _ => None,
    }
}

fn protocol_robustness() -> Check {
    let clean = external_history(&[])?;
    let tmp = tempfile::tempdir().unwrap();
    let marker = tmp.path().join("killed");
    let marker = marker.to_str().unwrap();
    let faulty = external_history(&["--die-after", "7", "--once-marker", marker])?;
    ensure(Path::new(marker).exists(), || {
        "the worker was never killed".into()
    })?;
    let json = |h: &RunHistory| {
        serde_json::to_string(&(&h.initial, &h.records)).expect("history serializes")
    };
    ensure(json(&clean) == json(&faulty), || {
        "history after worker kill differs".into()
    })?;

    match pool_error(&["--malformed-after", "1"]) {
        Some(PoolError::Malformed { line_number, .. }) => ensure(line_number > 0, || {
            "malformed error lacks a line number".into()
        })?,
        other => return Err(format!("malformed line gave {other:?}")),
    }
    match pool_error(&["--protocol-version", "2"]) {
        Some(PoolError::VersionMismatch {
            expected: 1,
            got: 2,
            ..
        }) => {}
        other => return Err(format!("version mismatch gave {other:?}")),
    }
    Ok("kill mid-generation recovered identically; Malformed and VersionMismatch raised".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("cost model reproduces TMACs", cost_model),
        ("latency normalization", latency_normalization),
        ("sort and frontier oracles", sorting_oracles),
        ("mutation statistics", mutation_statistics),
        ("rescale identity", rescale_identity),
        ("diophantine sampler", diophantine),
        ("end-to-end toy run", toy_run),
        ("determinism and resume", determinism_and_resume),
        ("protocol robustness", protocol_robustness),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
