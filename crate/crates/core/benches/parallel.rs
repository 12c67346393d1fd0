//! Parallel-vs-sequential comparison benches.
//!
//! `matmul/*` compares the dispatching kernel against the always-sequential
//! variant on square products. `batch_grads/*` runs the end-to-end
//! per-sample gradient batch; with the `parallel` feature the same code is
//! timed on a 1-thread pool and on the default pool. Without the feature
//! everything runs sequentially, so the pairs should coincide.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tnt_core::dataset::make_subpatch_task;
use tnt_core::model::{Model, TntConfig};
use tnt_core::tensor::{matmul, matmul_seq};
use tnt_core::tokenizer::ImageInput;
use tnt_core::training::batch_gradients;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &size in &[64usize, 192, 384] {
        let a: Vec<f64> = (0..size * size).map(|i| (i % 97) as f64 * 0.01).collect();
        let b: Vec<f64> = (0..size * size).map(|i| (i % 89) as f64 * 0.02 - 0.5).collect();
        group.bench_with_input(BenchmarkId::new("seq", size), &size, |bench, &s| {
            bench.iter(|| matmul_seq(&a, &b, 1, s, s, s, true));
        });
        group.bench_with_input(BenchmarkId::new("auto", size), &size, |bench, &s| {
            bench.iter(|| matmul(&a, &b, 1, s, s, s, true));
        });
    }
    group.finish();
}

fn bench_batch_gradients(c: &mut Criterion) {
    let model = Model::build(&TntConfig::tnt_micro(), 1).expect("build micro");
    let data = make_subpatch_task(1, 8);
    let batch: Vec<(&ImageInput, usize)> =
        data.images.iter().zip(data.labels.iter().copied()).collect();

    let mut group = c.benchmark_group("batch_grads");
    group.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool");
        group.bench_function("one_thread", |bench| {
            bench.iter(|| pool.install(|| batch_gradients(&model, &batch, 0.1, 7, 0).unwrap()));
        });
    }
    group.bench_function("default_threads", |bench| {
        bench.iter(|| batch_gradients(&model, &batch, 0.1, 7, 0).unwrap());
    });
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_batch_gradients);
criterion_main!(benches);
