use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ecad::exec::ExecMode;
use ecad::rng::{stream, RunRng};
use ecad::seeding::uniform_random_schedule;
use ecad::toydit::ToyEvaluator;
use ecad::{CachingSchedule, Evaluator, ModelTopology};

fn batch(topology: &Arc<ModelTopology>, n: usize) -> Vec<CachingSchedule> {
    let mut rng = RunRng::new(7, stream::SEEDING);
    (0..n)
        .map(|_| uniform_random_schedule(topology, &mut rng))
        .collect()
}

fn evaluate_batch(c: &mut Criterion) {
    let topology = Arc::new(ModelTopology::builtin("pixart-like").unwrap());
    let schedules = batch(&topology, 72);
    let mut group = c.benchmark_group("toy_evaluate_72");
    group.sample_size(20);
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        let eval = ToyEvaluator::for_topology(topology.clone(), 0, mode).unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{mode:?}")),
            &schedules,
            |b, s| b.iter(|| eval.evaluate(s).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, evaluate_batch);
criterion_main!(benches);
