use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use gapcascade_bench::{random_labels, random_logits, random_opinions};
use gapcascade_core::backends::{fan_out, FailurePolicy, SampleRef};
use gapcascade_core::eval::{sweep_trigger, threshold_grid, unit_steps, ArbiterModel};
use gapcascade_core::fusion::EnsembleEngine;
use gapcascade_core::loss::{total_loss, LossBatch, LossConfig};
use gapcascade_core::synth::{synthetic_log, synthetic_records};

fn fusion(c: &mut Criterion) {
    let engine = EnsembleEngine::default();
    let mut group = c.benchmark_group("predict");
    for classes in [10, 306, 1000] {
        let opinions = random_opinions(1, 4, classes);
        group.bench_with_input(BenchmarkId::from_parameter(classes), &opinions, |b, o| {
            b.iter(|| engine.predict(black_box(o)).unwrap())
        });
    }
    group.finish();
}

fn loss(c: &mut Criterion) {
    let (models, batch, classes) = (4, 32, 306);
    let logits = random_logits(2, models, batch, classes);
    let labels = random_labels(3, batch, classes);
    let hard: Vec<bool> = (0..batch).map(|i| i % 3 == 0).collect();
    let config = LossConfig::new(classes);
    let mut group = c.benchmark_group("total_loss");
    group.throughput(Throughput::Elements(batch as u64));
    group.bench_function("4x32x306", |b| {
        b.iter(|| {
            total_loss(
                black_box(&LossBatch {
                    logits: &logits,
                    labels: &labels,
                    hard_flags: &hard,
                    temperature: 1.0,
                }),
                &config,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn backends(c: &mut Criterion) {
    let log = synthetic_log(4, 200, 306, 4).unwrap();
    let set = log.backends();
    let sample = SampleRef::id_only("s000123");
    c.bench_function("fan_out/4 stores", |b| {
        b.iter(|| fan_out(&set, black_box(&sample), FailurePolicy::Strict).unwrap())
    });
}

fn sweep(c: &mut Criterion) {
    let records = synthetic_records(5, 2000, 20, 4);
    let steps = unit_steps(9);
    let grid = threshold_grid(&steps, &steps).unwrap();
    let mut group = c.benchmark_group("sweep");
    group.sample_size(20);
    group.throughput(Throughput::Elements((records.len() * grid.len()) as u64));
    group.bench_function("2000 records x 81 points", |b| {
        b.iter(|| sweep_trigger(black_box(&records), &grid, &ArbiterModel::PerfectInCandidates).unwrap())
    });
    group.finish();
}

criterion_group!(benches, fusion, loss, backends, sweep);
criterion_main!(benches);
