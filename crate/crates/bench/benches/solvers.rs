use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use projektor_bench::blobs;
use projektor_core::ot::{exact_ot, sinkhorn, CostSpec, FeatureMetric, SinkhornConfig};
use projektor_core::predictors::{fit_pq, TrainingTuple};
use projektor_core::MixingRatio;

fn transport(c: &mut Criterion) {
    let spec = CostSpec::features_only(FeatureMetric::SquaredEuclidean);
    let val = blobs("val", 30, 3, 7);
    let mut group = c.benchmark_group("transport");
    for n in [30, 100, 300] {
        let train = blobs("train", n, 3, 11);
        group.bench_with_input(BenchmarkId::new("exact", n), &train, |b, t| {
            b.iter(|| exact_ot(black_box(t), &val, &spec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sinkhorn", n), &train, |b, t| {
            b.iter(|| sinkhorn(black_box(t), &val, &spec, &SinkhornConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn fitting(c: &mut Criterion) {
    let mut tuples = Vec::new();
    for i in 0..=10 {
        for j in 0..=10 - i {
            let p = [i as f64 / 10.0, j as f64 / 10.0, (10 - i - j) as f64 / 10.0];
            let ot = 1.0 + p[0] - 0.5 * p[1] * p[1];
            let perf = 0.8 - 0.1 * ot + 0.05 * p[2];
            tuples.push(
                TrainingTuple::new(MixingRatio::new(p.to_vec()).unwrap(), 300, ot, perf).unwrap(),
            );
        }
    }
    c.bench_function("fit_pq_66", |b| {
        b.iter(|| fit_pq(black_box(&tuples)).unwrap())
    });
}

criterion_group!(benches, transport, fitting);
criterion_main!(benches);
