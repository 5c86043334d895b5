use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::s;
use protocurate::analysis::knn_mean_distance;
use protocurate::{curate_superbatch, fps_select, sinkhorn, CurationConfig, FpsPoint, SinkhornParams};
use protocurate_bench::{uniform_matrix, unified_corpus, warm_bank};

fn bench_sinkhorn(c: &mut Criterion) {
    let mut group = c.benchmark_group("sinkhorn");
    for n in [64usize, 548] {
        let cost = uniform_matrix(n, 6, 1) * 4.0;
        let params = SinkhornParams { epsilon: 0.5, ..SinkhornParams::default() };
        group.bench_with_input(BenchmarkId::from_parameter(n), &cost, |b, cost| {
            b.iter(|| sinkhorn(black_box(cost.view()), &params).unwrap())
        });
    }
    group.finish();
}

fn bench_fps(c: &mut Criterion) {
    let pts = uniform_matrix(100, 64, 2);
    let anchor = vec![0.5; 64];
    let points: Vec<FpsPoint<'_>> = pts
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| FpsPoint { id: i as u64, coords: r.to_slice().unwrap() })
        .collect();
    c.bench_function("fps/100x64/budget10", |b| b.iter(|| fps_select(black_box(&points), 10, &anchor)));
}

fn bench_knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn");
    group.sample_size(10);
    for n in [1000usize, 4000] {
        let pts = unified_corpus(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &pts, |b, pts| {
            b.iter(|| knn_mean_distance(black_box(pts.view()), 20).unwrap())
        });
    }
    group.finish();
}

fn bench_superbatch(c: &mut Criterion) {
    let data = unified_corpus(6400 + 640);
    let bank = warm_bank(&data.slice(s![..6400, ..]).to_owned(), 6);
    let batch = data.slice(s![6400.., ..]).to_owned();
    let ids: Vec<u64> = (0..640).collect();
    let config = CurationConfig::default();
    c.bench_function("curate_superbatch/640", |b| {
        b.iter(|| {
            let mut bank = bank.clone();
            curate_superbatch(&ids, black_box(batch.view()), &mut bank, &config, 0).unwrap()
        })
    });
}

criterion_group!(benches, bench_sinkhorn, bench_fps, bench_knn, bench_superbatch);
criterion_main!(benches);
