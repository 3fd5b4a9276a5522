use criterion::{criterion_group, criterion_main, Criterion};
use lpm_bench::lovo_fixture;
use lpm_core::inference::{self, InferenceOptions};
use lpm_core::lpm::{self, TrainOptions};

fn training(c: &mut Criterion) {
    let data = lovo_fixture(7);
    let opts = TrainOptions {
        restarts: 1,
        ..TrainOptions::default()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("control_k3", |b| b.iter(|| lpm::train_control(&data.control, 3, &opts).unwrap()));
    let control = lpm::train_control(&data.control, 3, &opts).unwrap().model;
    g.bench_function("treatment_k2", |b| {
        b.iter(|| lpm::train_treatment(&control, &data.treated, 2, &opts).unwrap())
    });
    g.finish();
}

fn fitting(c: &mut Criterion) {
    let data = lovo_fixture(7);
    let opts = TrainOptions::default();
    let control = lpm::train_control(&data.control, 3, &opts).unwrap().model;
    let model = lpm::train_treatment(&control, &data.treated, 2, &opts).unwrap().model;
    let h = &data.treated[0];
    c.bench_function("fit_quantities", |b| b.iter(|| lpm::fit_quantities(&model, h, 0).unwrap()));
    c.bench_function("assess", |b| {
        b.iter(|| inference::assess(&model, h, &InferenceOptions::default()).unwrap())
    });
}

criterion_group!(benches, training, fitting);
criterion_main!(benches);
