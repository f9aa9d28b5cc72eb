use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedvb_bench::bnn_round;
use fedvb_core::fed::run_round;
use fedvb_core::gauss::{gaussian_product, gaussian_quotient, DiagonalGaussian};
use fedvb_core::net::{bbb_grad, cross_entropy_grad, Batch, NetworkSpec, VariationalParams};
use ndarray::Array2;
use std::hint::black_box;

fn gaussian(n: usize, shift: f64) -> DiagonalGaussian {
    let mean = (0..n).map(|i| (i as f64 * 0.37 + shift).sin()).collect();
    let sd = (0..n).map(|i| 0.5 + 0.4 * (i as f64 * 0.11 + shift).cos()).collect();
    DiagonalGaussian::new(mean, sd).unwrap()
}

fn gauss_algebra(c: &mut Criterion) {
    let mut group = c.benchmark_group("gauss");
    for n in [1_000, 100_000] {
        let a = gaussian(n, 0.0);
        let b = gaussian(n, 1.3);
        let prod = gaussian_product(&a, &b).unwrap();
        group.bench_with_input(BenchmarkId::new("product", n), &n, |bench, _| {
            bench.iter(|| gaussian_product(black_box(&a), black_box(&b)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("quotient", n), &n, |bench, _| {
            bench.iter(|| gaussian_quotient(black_box(&prod), black_box(&a), 1e-8).unwrap())
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let spec = NetworkSpec::mlp(20, &[64]).unwrap().with_head(10).unwrap();
    let n = spec.param_count();
    let rows = 32;
    let features = Array2::from_shape_fn((rows, 20), |(i, j)| ((i * 20 + j) as f64 * 0.13).sin());
    let batch = Batch::new(features, (0..rows).map(|i| i % 10).collect()).unwrap();
    let w = spec.init_weights(1);
    let q = VariationalParams::from_point(w.values(), 0.05);
    let prior = DiagonalGaussian::isotropic(vec![0.0; n], 0.1).unwrap();
    let noise: Vec<f64> = (0..n).map(|i| (i as f64 * 0.71).sin()).collect();

    let mut group = c.benchmark_group("gradients");
    group.bench_function("cross_entropy", |bench| {
        bench.iter(|| cross_entropy_grad(&spec, black_box(w.values()), &batch).unwrap())
    });
    group.bench_function("bbb", |bench| {
        bench.iter(|| bbb_grad(&spec, black_box(&q), &prior, &batch, 0.1, &noise).unwrap())
    });
    group.finish();
}

fn federated_round(c: &mut Criterion) {
    let (state, plan, config) = bnn_round(10, 32);
    let mut group = c.benchmark_group("round");
    group.sample_size(20);
    group.bench_function("bnn_10_clients", |bench| {
        bench.iter(|| run_round(&state, &plan, &config, 9, None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, gauss_algebra, gradients, federated_round);
criterion_main!(benches);
