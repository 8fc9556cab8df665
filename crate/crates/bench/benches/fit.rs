use criterion::{criterion_group, criterion_main, Criterion};
use ect_bench::{model, scenario, scenario_config, training_set};
use ect_core::{fit, sample_scenario, train_pdm, FitConfig, TrainOptions};
use std::hint::black_box;

fn bench(c: &mut Criterion) {
    let set = training_set();
    let model = model(&set);
    let sc = scenario(&model, 1);
    let cfg = FitConfig::default();

    c.bench_function("fit_68_landmarks", |b| {
        b.iter(|| fit(&model, black_box(&sc.stack), &cfg).unwrap())
    });
    c.bench_function("sample_scenario_256", |b| {
        let cfg = scenario_config(1, 0.3, 0.1);
        b.iter(|| sample_scenario(&model, black_box(&cfg)).unwrap())
    });
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_pdm_300", |b| {
        b.iter(|| train_pdm(black_box(&set.shapes), &TrainOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
