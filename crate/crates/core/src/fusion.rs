//! Per-region descriptors: each region is assigned a pyramid level by
//! its size, pooled from that level *and* its two neighbors, and the
//! three pooled maps are concatenated and projected back down by a 1x1
//! conv — no activation after the projection, so the fusion is a
//! learned linear blend of scales.
//!
//! Regions come in two flavors that never mix: the original proposal
//! box (used by the scoring head) and a concentric enlarged box that
//! adds surrounding context (used by the box-refinement head and the
//! dependencies block). Descriptors are tagged with their origin and
//! every consumer checks the tag.

use rand::Rng;

use crate::boxes::BBox;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

/// Which box a descriptor was pooled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// The proposal box itself.
    Original,
    /// The concentric enlarged box.
    Enlarged,
}

impl std::fmt::Display for Origin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Origin::Original => write!(f, "original-box"),
            Origin::Enlarged => write!(f, "enlarged-box"),
        }
    }
}

/// Fixed-size feature map summarizing one region.
#[derive(Debug)]
pub struct FusedDescriptor {
    pub origin: Origin,
    /// `[descriptor_channels, pool, pool]`.
    pub features: Tensor,
}

/// Pyramid level for a box: `k = floor(k0 + log2(sqrt(area) / s0))`,
/// clamped to the configured range. Bigger boxes map to coarser levels;
/// a box of the canonical size `s0` maps to `k0`.
pub fn assign_level(b: &BBox, cfg: &RunConfig) -> usize {
    let scale = b.area().sqrt() / cfg.level_canonical_size;
    let k = (cfg.level_offset + scale.log2()).floor();
    // Clamp in f64 first: casting a negative f64 to usize saturates at
    // 0, which would skip the lower bound.
    let lo = cfg.level_min as f64;
    let hi = cfg.level_max as f64;
    k.clamp(lo, hi) as usize
}

/// Concentric enlargement by the configured factors, clipped to the
/// image. The input must intersect the image (proposals always do).
pub fn enlarge_box(b: &BBox, cfg: &RunConfig, image_side: f64) -> Result<BBox> {
    let (cx, cy) = b.center();
    let w = b.width() * cfg.enlarge_w;
    let h = b.height() * cfg.enlarge_h;
    let grown = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)?;
    grown.clip(image_side, image_side).ok_or_else(|| {
        Error::InvalidBox(format!("region {grown:?} lies outside the {image_side}px image"))
    })
}

/// Pools and fuses regions of one origin. Holds one projection when
/// fusing three levels, or a thinner one when multi-level fusion is
/// disabled and only the assigned level is pooled.
pub struct RegionFusion {
    origin: Origin,
    fuse_three: bool,
    pool: usize,
    reduce: Conv2dLayer,
}

impl RegionFusion {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig, origin: Origin) -> RegionFusion {
        let in_ch = if cfg.use_adaptive_fusion {
            3 * cfg.pyramid_channels
        } else {
            cfg.pyramid_channels
        };
        RegionFusion {
            origin,
            fuse_three: cfg.use_adaptive_fusion,
            pool: cfg.roi_pool_size,
            reduce: Conv2dLayer::new(rng, in_ch, cfg.descriptor_channels, 1, 1, 0),
        }
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    /// Pool `region` from the pyramid and project to a descriptor.
    pub fn forward(
        &self,
        pyr: &FeaturePyramid,
        region: &BBox,
        cfg: &RunConfig,
    ) -> Result<FusedDescriptor> {
        let k = assign_level(region, cfg);
        let pooled = if self.fuse_three {
            let mut parts = Vec::with_capacity(3);
            for level in [k - 1, k, k + 1] {
                let map = pyr.level(level)?;
                let scale = 1.0 / FeaturePyramid::stride(level) as f64;
                parts.push(map.roi_pool(region, self.pool, scale)?);
            }
            Tensor::concat_channels(&parts)?
        } else {
            let map = pyr.level(k)?;
            let scale = 1.0 / FeaturePyramid::stride(k) as f64;
            map.roi_pool(region, self.pool, scale)?
        };
        Ok(FusedDescriptor { origin: self.origin, features: self.reduce.forward(&pooled)? })
    }

    pub fn collect(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        self.reduce.collect(&format!("{name}.reduce"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::PyramidKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn canonical_box_maps_to_the_top_of_the_range() {
        let cfg = RunConfig::default();
        assert_eq!(assign_level(&bx(0.0, 0.0, 224.0, 224.0), &cfg), 4);
        assert_eq!(assign_level(&bx(0.0, 0.0, 56.0, 56.0), &cfg), 3);
        // Tiny boxes clamp at the bottom of the range.
        assert_eq!(assign_level(&bx(0.0, 0.0, 1.0, 1.0), &cfg), 3);
    }

    #[test]
    fn level_is_monotone_in_box_size() {
        let cfg = RunConfig::default();
        let mut last = 0;
        for side in 1..=256 {
            let k = assign_level(&bx(0.0, 0.0, side as f64, side as f64), &cfg);
            assert!(k >= last, "level dropped at side {side}");
            assert!((cfg.level_min..=cfg.level_max).contains(&k));
            last = k;
        }
    }

    #[test]
    fn enlargement_preserves_center_and_grows_sides() {
        let cfg = RunConfig::default();
        let b = bx(40.0, 60.0, 80.0, 100.0);
        let e = enlarge_box(&b, &cfg, 256.0).unwrap();
        let (cx, cy) = b.center();
        let (ex, ey) = e.center();
        assert!((cx - ex).abs() < 1e-12 && (cy - ey).abs() < 1e-12);
        assert!((e.width() - 48.0).abs() < 1e-12);
        assert!((e.height() - 48.0).abs() < 1e-12);
    }

    #[test]
    fn enlargement_clips_at_the_border() {
        let cfg = RunConfig::default();
        let b = bx(0.0, 0.0, 50.0, 50.0);
        let e = enlarge_box(&b, &cfg, 256.0).unwrap();
        assert_eq!((e.x1, e.y1), (0.0, 0.0));
        assert!((e.x2 - 55.0).abs() < 1e-12);
    }

    fn tiny_pyramid(channels: usize) -> FeaturePyramid {
        let mut levels = Vec::new();
        for k in 2..=5usize {
            let side = 256 >> k;
            let data: Vec<f64> =
                (0..channels * side * side).map(|i| (i % 13) as f64 / 13.0).collect();
            levels.push(Tensor::new(&[channels, side, side], data).unwrap());
        }
        FeaturePyramid { kind: PyramidKind::Augmented, levels }
    }

    #[test]
    fn fused_descriptor_has_configured_shape_and_origin() {
        let mut cfg = RunConfig::default();
        cfg.pyramid_channels = 4;
        cfg.descriptor_channels = 10;
        cfg.roi_pool_size = 7;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let fusion = RegionFusion::new(&mut rng, &cfg, Origin::Enlarged);
        let pyr = tiny_pyramid(4);
        let d = fusion.forward(&pyr, &bx(30.0, 30.0, 90.0, 90.0), &cfg).unwrap();
        assert_eq!(d.origin, Origin::Enlarged);
        assert_eq!(d.features.shape(), &[10, 7, 7]);
    }

    #[test]
    fn single_level_variant_pools_only_the_assigned_level() {
        let mut cfg = RunConfig::default();
        cfg.pyramid_channels = 4;
        cfg.descriptor_channels = 6;
        cfg.use_adaptive_fusion = false;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let fusion = RegionFusion::new(&mut rng, &cfg, Origin::Original);
        // Reduce conv consumes pyramid_channels, not 3x.
        assert_eq!(fusion.reduce.weight.shape(), &[6, 4, 1, 1]);
        let pyr = tiny_pyramid(4);
        let d = fusion.forward(&pyr, &bx(10.0, 10.0, 60.0, 60.0), &cfg).unwrap();
        assert_eq!(d.features.shape(), &[6, 14, 14]);
    }

    #[test]
    fn projection_is_linear_no_clamping_of_negatives() {
        // With a negative input map and positive weights the fused
        // descriptor must keep negative values (no hidden activation).
        let mut cfg = RunConfig::default();
        cfg.pyramid_channels = 2;
        cfg.descriptor_channels = 3;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let fusion = RegionFusion::new(&mut rng, &cfg, Origin::Original);
        let mut levels = Vec::new();
        for k in 2..=5usize {
            let side = 256 >> k;
            levels.push(Tensor::full(&[2, side, side], -1.0));
        }
        let pyr = FeaturePyramid { kind: PyramidKind::Augmented, levels };
        let d = fusion.forward(&pyr, &bx(20.0, 20.0, 120.0, 120.0), &cfg).unwrap();
        let vals = d.features.to_vec();
        assert!(vals.iter().any(|&v| v < 0.0), "linear projection preserved sign");
    }
}
