//! Dense anchor boxes: a fixed set of (area, aspect) shapes replicated
//! at every position of every pyramid level.
//!
//! Flat index convention, matching the `[A, H, W]` layout of the
//! proposal-head outputs: `idx = shape_idx * (H*W) + gy * W + gx` with
//! `shape_idx = area_idx * num_ratios + ratio_idx`.

use crate::boxes::BBox;
use crate::config::RunConfig;
use crate::error::Result;

/// (width, height) of each anchor shape, area-major.
pub fn anchor_shapes(cfg: &RunConfig) -> Vec<(f64, f64)> {
    let mut shapes = Vec::with_capacity(cfg.anchors_per_position());
    for &area in &cfg.anchor_areas {
        for &ratio in &cfg.anchor_ratios {
            // ratio = h / w and w * h = area.
            let w = (area / ratio).sqrt();
            let h = (area * ratio).sqrt();
            shapes.push((w, h));
        }
    }
    shapes
}

/// All anchors of one level as boxes in image coordinates, centered on
/// grid cells, unclipped (border anchors may overhang the image).
pub fn grid_anchors(stride: usize, grid_h: usize, grid_w: usize, shapes: &[(f64, f64)]) -> Result<Vec<BBox>> {
    let mut anchors = Vec::with_capacity(shapes.len() * grid_h * grid_w);
    for &(w, h) in shapes {
        for gy in 0..grid_h {
            let cy = (gy as f64 + 0.5) * stride as f64;
            for gx in 0..grid_w {
                let cx = (gx as f64 + 0.5) * stride as f64;
                anchors.push(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)?);
            }
        }
    }
    Ok(anchors)
}

/// Anchors for every pyramid level of a square image, index 0 = level 2.
pub fn pyramid_anchors(cfg: &RunConfig) -> Result<Vec<Vec<BBox>>> {
    let shapes = anchor_shapes(cfg);
    let mut per_level = Vec::with_capacity(4);
    for k in crate::pyramid::MIN_LEVEL..=crate::pyramid::MAX_LEVEL {
        let stride = 1usize << k;
        let side = cfg.image_side / stride;
        per_level.push(grid_anchors(stride, side, side, &shapes)?);
    }
    Ok(per_level)
}
