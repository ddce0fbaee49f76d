//! Criterion benchmarks for the kernels that dominate training and
//! evaluation wall time, at the exact shapes the desk profile runs:
//! dense convolution, the position-attention block, region pooling,
//! suppression, curve metrics, and the two end-to-end units (one
//! optimization step, one image inference).

use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use tumordet_bench::{desk_config, desk_scene, random_tensor, scored_boxes, scored_instances};
use tumordet_core::dc::DependenciesBlock;
use tumordet_core::fusion::Origin;
use tumordet_core::metrics::{match_detections, roc_auc};
use tumordet_core::optim::{LrSchedule, Sgd};
use tumordet_core::rpn::nms;
use tumordet_core::BBox;

/// 3x3 convolution at the busiest pyramid shape: 16 channels, 64x64.
fn conv3x3(c: &mut Criterion) {
    let x = random_tensor(&[16, 64, 64], 1);
    let k = random_tensor(&[16, 16, 3, 3], 2);
    c.bench_function("conv3x3 16ch 64px", |b| {
        b.iter(|| black_box(&x).conv2d(black_box(&k), 1, 1).unwrap())
    });
}

/// Position attention over a pooled 32x7x7 region descriptor.
fn attention_block(c: &mut Criterion) {
    let cfg = desk_config();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let block = DependenciesBlock::new(&mut rng, &cfg, Origin::Enlarged);
    let x = random_tensor(&[cfg.descriptor_channels, cfg.roi_pool_size, cfg.roi_pool_size], 4);
    c.bench_function("attention block 32ch 7x7", |b| {
        b.iter(|| block.forward(black_box(&x)).unwrap())
    });
}

/// Pool one region from a stride-8 pyramid level into a 7x7 grid.
fn region_pool(c: &mut Criterion) {
    let map = random_tensor(&[16, 32, 32], 5);
    let roi = BBox::new(70.0, 60.0, 150.0, 170.0).unwrap();
    c.bench_function("roi_pool 16ch to 7x7", |b| {
        b.iter(|| black_box(&map).roi_pool(black_box(&roi), 7, 1.0 / 8.0).unwrap())
    });
}

/// Suppress a pre-selection-sized candidate set down to 40 boxes.
fn suppression(c: &mut Criterion) {
    let dets = scored_boxes(300, 6);
    c.bench_function("nms 300 candidates", |b| {
        b.iter(|| nms(black_box(&dets), 0.7, 40))
    });
}

/// Greedy matching plus the tie-aware ROC curve over one test split.
fn curve_metrics(c: &mut Criterion) {
    let dets = scored_boxes(24, 7);
    let gts: Vec<BBox> = scored_boxes(6, 8).into_iter().map(|d| d.bbox).collect();
    c.bench_function("match 24 detections vs 6 boxes", |b| {
        b.iter(|| match_detections(black_box(&dets), black_box(&gts), 0.5))
    });

    let instances = scored_instances(1000, 9);
    c.bench_function("roc_auc 1000 instances", |b| {
        b.iter(|| roc_auc(black_box(&instances)).unwrap())
    });
}

/// One full optimization step: forward, losses, backward, update.
fn train_step(c: &mut Criterion) {
    let (model, image, lesions) = desk_scene();
    let cfg = model.config.clone();
    let params = model.named_parameters();
    let schedule = LrSchedule::new(&cfg);
    let mut opt = Sgd::new(&cfg);
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let mut iteration = 0u64;
    let mut group = c.benchmark_group("end-to-end");
    group.sample_size(20).measurement_time(Duration::from_secs(10));
    group.bench_function("train step (desk profile)", |b| {
        b.iter(|| {
            model.backward_step(black_box(&image), black_box(&lesions), &mut rng).unwrap();
            opt.step(&params, schedule.rate(iteration), iteration).unwrap();
            iteration += 1;
        })
    });
    group.finish();
}

/// Inference on one 256px scan, proposals through final suppression.
fn detect_image(c: &mut Criterion) {
    let (model, image, _) = desk_scene();
    let mut group = c.benchmark_group("end-to-end");
    group.sample_size(20).measurement_time(Duration::from_secs(10));
    group.bench_function("detect one scan (desk profile)", |b| {
        b.iter(|| model.detect(black_box(&image)).unwrap())
    });
    group.finish();
}

criterion_group!(
    kernels,
    conv3x3,
    attention_block,
    region_pool,
    suppression,
    curve_metrics,
    train_step,
    detect_image
);
criterion_main!(kernels);
