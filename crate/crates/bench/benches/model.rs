use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use stnet_bench::{dataset, model};
use stnet_core::harness::Trainer;
use stnet_core::TrainConfig;

fn forward(c: &mut Criterion) {
    let data = dataset(16);
    let idx: Vec<usize> = (0..16).collect();
    let batch = data.batch(&idx).unwrap();
    let mut group = c.benchmark_group("reconstruct_batch16");
    group.throughput(Throughput::Elements(16));
    for den in [4u64, 64] {
        let params = model(den);
        group.bench_with_input(BenchmarkId::from_parameter(format!("1/{den}")), &den, |bench, _| {
            bench.iter(|| black_box(params.reconstruct(&batch).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let data = dataset(16);
    let idx: Vec<usize> = (0..16).collect();
    let mut trainer = Trainer::new(
        model(4),
        TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let mut group = c.benchmark_group("adam_step");
    group.sample_size(20);
    group.bench_function("batch16_1/4", |bench| bench.iter(|| black_box(trainer.step_on(&data, &idx).unwrap())));
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
