use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use hinova_core::detector::{kendall_tau, kendall_tau_brute};
use hinova_core::nn::{ModelSpec, Network};
use hinova_core::preprocess::{Autocorrelator, SLICE_LEN};
use hinova_core::seed::rng_for;
use rand::Rng;

fn autocorrelation(c: &mut Criterion) {
    let mut rng = rng_for(&[1]);
    let x: Vec<f64> = (0..SLICE_LEN).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ac = Autocorrelator::new();
    c.bench_function("autocorrelate 2048", |b| {
        b.iter(|| ac.autocorrelate(black_box(&x)).unwrap())
    });
}

fn kendall(c: &mut Criterion) {
    let mut rng = rng_for(&[2]);
    let n = 25 * 32;
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64).collect();
    let mut group = c.benchmark_group("kendall tau 800 tied");
    group.bench_function("merge sort", |b| {
        b.iter(|| kendall_tau(black_box(&x), black_box(&y)).unwrap())
    });
    group.bench_function("all pairs", |b| {
        b.iter(|| kendall_tau_brute(black_box(&x), black_box(&y)).unwrap())
    });
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut rng = rng_for(&[3]);
    let mut group = c.benchmark_group("forward batch 32");
    group.sample_size(10);
    for (name, spec) in [("desk", ModelSpec::desk(10)), ("full", ModelSpec::full(10))] {
        let mut net = Network::<f32>::new(&spec, 0).unwrap();
        let xs: Vec<Vec<f32>> = (0..32)
            .map(|_| (0..spec.input_len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        net.recalibrate_norms([xs.iter().map(Vec::as_slice).collect()]).unwrap();
        group.bench_function(name, |b| {
            b.iter_batched(
                || xs.iter().map(Vec::as_slice).collect::<Vec<_>>(),
                |batch| net.forward_eval(&batch).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, autocorrelation, kendall, forward);
criterion_main!(benches);
