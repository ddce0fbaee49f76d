//! Deterministic fixtures for the kernel benchmarks: tensors, scored
//! boxes and a desk-scale detector that match the shapes the real
//! pipeline runs at, so measured numbers transfer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use tumordet_core::metrics::Detection;
use tumordet_core::tensor::Tensor;
use tumordet_core::{BBox, Detector, RunConfig};

/// Uniform draws in `[0, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(shape, data).unwrap()
}

/// The thin single-core training profile used by the benchmarks.
pub fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone_widths = vec![8, 16, 32, 64];
    cfg.pyramid_channels = 16;
    cfg.descriptor_channels = 32;
    cfg.dc_mid_channels = 16;
    cfg.head_hidden = 64;
    cfg.roi_pool_size = 7;
    cfg.pre_nms_k = 300;
    cfg.post_nms_k = 40;
    cfg.rpn_batch = 64;
    cfg.rois_per_step = 24;
    cfg
}

/// A ready-to-run detector plus one input image and its lesion box.
pub fn desk_scene() -> (Detector, Tensor, Vec<BBox>) {
    let cfg = desk_config();
    let model = Detector::new(&cfg).unwrap();
    let image = random_tensor(&[1, cfg.image_side, cfg.image_side], 11);
    let lesions = vec![BBox::new(90.0, 88.0, 132.0, 136.0).unwrap()];
    (model, image, lesions)
}

/// Overlapping scored boxes, the shape of a pre-suppression candidate set.
pub fn scored_boxes(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let cx = rng.gen_range(32.0..224.0);
            let cy = rng.gen_range(32.0..224.0);
            let w = rng.gen_range(12.0..64.0);
            let h = rng.gen_range(12.0..64.0);
            Detection {
                bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).unwrap(),
                score: rng.gen::<f64>(),
            }
        })
        .collect()
}

/// Scored binary instances with ties, the shape of an ROC input.
pub fn scored_instances(n: usize, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let positive = rng.gen::<bool>();
            let base: f64 = if positive { 0.6 } else { 0.4 };
            // Two-decimal scores force the tie handling onto the hot path.
            let score = ((base + rng.gen_range(-0.4..0.4)) * 100.0).round() / 100.0;
            (score, positive)
        })
        .collect()
}
