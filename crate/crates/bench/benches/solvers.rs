use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pfa_bench::{random_probs, scene};
use pfa_core::{
    crf_mean_field, extract_features, potts_map, predict_local, select_and_retrain, synthetic_filter_bank,
    train_forest, DenseCrfParams, ForestConfig, PottsParams,
};

const SIZES: [(usize, usize); 2] = [(48, 64), (80, 104)];

fn potts(c: &mut Criterion) {
    let mut group = c.benchmark_group("potts_map");
    group.sample_size(10);
    for (h, w) in SIZES {
        let s = scene(h, w, 1);
        let p = random_probs(s.image.grid(), 5, 2);
        let params = PottsParams { lambda: Some(1.0), tol: 0.0, max_iters: 100, ..Default::default() };
        group.bench_function(BenchmarkId::from_parameter(format!("{h}x{w}")), |b| {
            b.iter(|| potts_map(&p, &s.image, &params).unwrap())
        });
    }
    group.finish();
}

fn crf(c: &mut Criterion) {
    let mut group = c.benchmark_group("crf_mean_field");
    group.sample_size(10);
    // The first size is below the exact-kernel cap, the second above it.
    for (h, w) in SIZES {
        let s = scene(h, w, 3);
        let p = random_probs(s.image.grid(), 5, 4);
        let params = DenseCrfParams { tol: 0.0, ..Default::default() };
        group.bench_function(BenchmarkId::from_parameter(format!("{h}x{w}")), |b| {
            b.iter(|| crf_mean_field(&p, &s.image, &params).unwrap())
        });
    }
    group.finish();
}

fn features(c: &mut Criterion) {
    let s = scene(80, 104, 5);
    let bank = synthetic_filter_bank(0);
    c.bench_function("extract_features/80x104", |b| b.iter(|| extract_features(&s.image, &bank)));
}

fn forest(c: &mut Criterion) {
    let s = scene(80, 104, 6);
    let f = extract_features(&s.image, &synthetic_filter_bank(0));
    let cfg = ForestConfig::default();
    let mut group = c.benchmark_group("forest");
    group.sample_size(10);
    group.bench_function("train", |b| b.iter(|| train_forest(&f, &s.scribbles, &cfg).unwrap()));
    group.bench_function("select_and_retrain", |b| b.iter(|| select_and_retrain(&f, &s.scribbles, &cfg).unwrap()));
    let trained = select_and_retrain(&f, &s.scribbles, &cfg).unwrap();
    group.bench_function("predict", |b| b.iter(|| predict_local(&trained, &f).unwrap()));
    group.finish();
}

criterion_group!(benches, potts, crf, features, forest);
criterion_main!(benches);
