use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rotorwatch_bench::tone_batch;
use rotorwatch_core::features::{extract_all, FeatureConfig};
use rotorwatch_core::iforest::{self, ForestConfig};
use rotorwatch_core::neural::{Architecture, AutoencoderParams};

fn lstm(c: &mut Criterion) {
    let batch = tone_batch(64, 3);
    let params = AutoencoderParams::init(Architecture::new(3, vec![32, 8]).unwrap(), 0.0, 1).unwrap();
    c.bench_function("autoencoder forward 64x3 [32,8]", |b| {
        b.iter(|| params.forward(black_box(&batch), None).unwrap())
    });
    let cache = params.forward(&batch, None).unwrap();
    c.bench_function("autoencoder backward 64x3 [32,8]", |b| {
        b.iter(|| params.backward(black_box(&batch), &cache))
    });
}

fn features(c: &mut Criterion) {
    let batch = tone_batch(1024, 4);
    let config = FeatureConfig::default();
    c.bench_function("handcrafted features 1024x4", |b| {
        b.iter(|| extract_all(black_box(&batch), &config).unwrap())
    });
}

fn forest(c: &mut Criterion) {
    let batch = tone_batch(2000, 4);
    let points: Vec<Vec<f64>> = batch.rows().map(<[f64]>::to_vec).collect();
    let config = ForestConfig::default();
    c.bench_function("isolation forest fit 2000x4", |b| {
        b.iter(|| iforest::fit(black_box(&points), &config).unwrap())
    });
    let model = iforest::fit(&points, &config).unwrap();
    c.bench_function("isolation forest score 2000x4", |b| {
        b.iter(|| model.score_all(black_box(&points)).unwrap())
    });
}

criterion_group!(benches, lstm, features, forest);
criterion_main!(benches);
