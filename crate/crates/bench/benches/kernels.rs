//! Criterion benchmarks of the hot computational kernels.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seamil_core::cam::{pixel_correlation, refine_cam, CamHeadParams, FeatureMap};
use seamil_core::metrics::auroc;
use seamil_core::model::{BackboneKind, HeadDims, ModelParams};
use seamil_core::trainer::{forward_siamese, ForwardSettings};

fn bench_refine_cam(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let features = FeatureMap::new(
        Array3::from_shape_fn((64, 16, 16), |_| rng.gen_range(0.0..1.0)),
        8,
    );
    let head = CamHeadParams {
        projection: Array2::from_shape_fn((2, 64), |_| rng.gen_range(-0.1..0.1)),
        embedding: Array2::from_shape_fn((16, 64), |_| rng.gen_range(-0.1..0.1)),
    };
    let cam = seamil_core::cam::compute_cam(&features, &head, true).unwrap();
    let embedded = seamil_core::cam::embed_features(&features, &head).unwrap();

    c.bench_function("pixel_correlation_16x16", |b| {
        b.iter(|| pixel_correlation(std::hint::black_box(&embedded)))
    });

    let corr = pixel_correlation(&embedded);
    c.bench_function("refine_cam_16x16", |b| {
        b.iter(|| refine_cam(std::hint::black_box(&cam), &corr).unwrap())
    });
}

fn bench_auroc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<bool> = (0..10_000).map(|_| rng.gen_bool(0.5)).collect();
    c.bench_function("auroc_10k", |b| {
        b.iter(|| auroc(std::hint::black_box(&scores), &labels).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = ModelParams::init(BackboneKind::ToyCnn, 1, 64, HeadDims::defaults(64), 5);
    let image = Array3::from_shape_fn((1, 64, 64), |_| rng.gen_range(0.0..1.0));
    let settings = ForwardSettings::default();
    c.bench_function("siamese_forward_64px", |b| {
        b.iter(|| forward_siamese(&params, std::hint::black_box(&image), &settings).unwrap())
    });
}

criterion_group!(benches, bench_refine_cam, bench_auroc, bench_forward);
criterion_main!(benches);
