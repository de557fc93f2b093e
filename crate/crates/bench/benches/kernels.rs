//! Benchmarks for the kernels that dominate training time: Kronecker
//! products, Cholesky factorizations, Gram accumulation, the layer posterior
//! refresh, and whole training steps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use bali_bench::{layer_shaped_batch, random_matrix, random_spd, training_setup};
use bali_core::conjugate::{mniw_posterior_from_stats, Mniw, MniwPriorTerms};
use bali_core::tensor::{cholesky, kron};

fn bench_kron(c: &mut Criterion) {
    let a = random_matrix(16, 16, 1);
    let b = random_matrix(8, 8, 2);
    c.bench_function("kron_16x16_by_8x8", |bench| {
        bench.iter(|| kron(black_box(&a), black_box(&b)))
    });
}

fn bench_cholesky(c: &mut Criterion) {
    let a = random_spd(257, 3);
    c.bench_function("cholesky_257", |bench| {
        bench.iter(|| cholesky(black_box(&a), 0.0).expect("fixture is spd"))
    });
}

fn bench_gram(c: &mut Criterion) {
    let x = random_matrix(128, 257, 5);
    c.bench_function("gram_128x257", |bench| bench.iter(|| black_box(&x).tr_matmul(&x)));
}

fn bench_posterior_refresh(c: &mut Criterion) {
    let (dx, dy, n) = (257, 256, 128.0);
    let (x, y) = layer_shaped_batch(128, dx, dy, 6);
    let prior = Mniw::isotropic_prior(dx, dy, 40.0, 1.28, (dy + 2) as f64).expect("prior dims are valid");
    let terms = MniwPriorTerms::from_prior(&prior).expect("prior factors");
    let sxx = x.tr_matmul(&x);
    let sxy = x.tr_matmul(&y);
    let syy = y.tr_matmul(&y);
    let mut group = c.benchmark_group("posterior");
    group.sample_size(20);
    group.bench_function("refresh_257x256", |bench| {
        bench.iter(|| {
            mniw_posterior_from_stats(
                black_box(&terms),
                black_box(&sxx),
                black_box(&sxy),
                black_box(&syy),
                n,
            )
            .expect("statistics are consistent")
        })
    });
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (width, depth) in [(64usize, 2usize), (256, 3)] {
        let (model, x, y) = training_setup(width, depth, 128);
        group.bench_function(format!("sinc_{depth}x{width}_batch128"), |bench| {
            bench.iter_batched(
                || model.clone(),
                |mut m| {
                    m.train_step(black_box(&x), black_box(&y)).expect("step succeeds");
                    m
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let (mut model, x, y) = training_setup(64, 2, 128);
    for _ in 0..10 {
        model.train_step(&x, &y).expect("warmup steps succeed");
    }
    let grid = random_matrix(201, 1, 7);
    let mut group = c.benchmark_group("predict");
    group.sample_size(20);
    group.bench_function("grid201_64_samples", |bench| {
        bench.iter(|| model.predict(black_box(&grid), 64).expect("prediction succeeds"))
    });
    group.finish();
}

criterion_group!(
    kernels,
    bench_kron,
    bench_cholesky,
    bench_gram,
    bench_posterior_refresh,
    bench_train_step,
    bench_predict
);
criterion_main!(kernels);
