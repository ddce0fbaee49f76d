//! Feature pyramids over levels 2..=5 (stride `2^k` at level `k`).
//!
//! Two constructions:
//! - the top-down pyramid: 1x1 lateral projections of the backbone
//!   maps, merged coarse-to-fine with nearest-neighbor upsampling and
//!   smoothed by a 3x3 conv (the top level has no coarser input and is
//!   left unsmoothed);
//! - the bottom-up augmented pyramid built on top of it: the finest
//!   level is adopted as-is, then each coarser level is the sum of a
//!   stride-2 projection of the previous augmented level and the
//!   top-down level, refined by a 3x3 conv.

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::tensor::Tensor;

pub const MIN_LEVEL: usize = 2;
pub const MAX_LEVEL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidKind {
    /// Top-down merged pyramid.
    TopDown,
    /// Bottom-up augmented pyramid.
    Augmented,
}

/// Maps for levels 2..=5; `levels[0]` is level 2 (stride 4).
pub struct FeaturePyramid {
    pub kind: PyramidKind,
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn level(&self, k: usize) -> Result<&Tensor> {
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&k) {
            return Err(Error::ShapeMismatch(format!(
                "pyramid level {k} outside {MIN_LEVEL}..={MAX_LEVEL}"
            )));
        }
        Ok(&self.levels[k - MIN_LEVEL])
    }

    pub fn stride(k: usize) -> usize {
        1 << k
    }
}

/// Top-down pyramid: laterals plus coarse-to-fine merging.
pub struct TopDownPyramid {
    /// 1x1 projections for levels 2..=5.
    laterals: Vec<Conv2dLayer>,
    /// 3x3 smoothing for levels 2..=4 (level 5 is not merged).
    smooths: Vec<Conv2dLayer>,
}

impl TopDownPyramid {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig) -> TopDownPyramid {
        let laterals = cfg
            .backbone_widths
            .iter()
            .map(|&w| Conv2dLayer::new(rng, w, cfg.pyramid_channels, 1, 1, 0))
            .collect();
        let smooths = (0..3)
            .map(|_| Conv2dLayer::new(rng, cfg.pyramid_channels, cfg.pyramid_channels, 3, 1, 1))
            .collect();
        TopDownPyramid { laterals, smooths }
    }

    /// Backbone maps (index 0 = level 2) -> top-down pyramid.
    pub fn forward(&self, backbone_maps: &[Tensor; 4]) -> Result<FeaturePyramid> {
        // Top level: lateral only.
        let mut levels = vec![self.laterals[3].forward(&backbone_maps[3])?];
        // Walk down: level k = smooth(lateral(C_k) + upsample(level k+1)),
        // where the coarser input is the already-smoothed map.
        for k in (0..3).rev() {
            let lateral = self.laterals[k].forward(&backbone_maps[k])?;
            let above = levels.last().expect("built top first").upsample_nearest2()?;
            let merged = lateral.add(&above)?;
            levels.push(self.smooths[k].forward(&merged)?);
        }
        levels.reverse();
        Ok(FeaturePyramid { kind: PyramidKind::TopDown, levels })
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.laterals.iter().enumerate() {
            l.collect(&format!("pyramid.lateral{}", i + MIN_LEVEL), out);
        }
        for (i, s) in self.smooths.iter().enumerate() {
            s.collect(&format!("pyramid.smooth{}", i + MIN_LEVEL), out);
        }
    }
}

/// Bottom-up augmentation on top of the top-down pyramid.
pub struct AugmentedPyramid {
    /// Stride-2 3x3 projections feeding levels 3..=5.
    downs: Vec<Conv2dLayer>,
    /// 3x3 refinements after each merge, levels 3..=5.
    posts: Vec<Conv2dLayer>,
    relu: bool,
}

impl AugmentedPyramid {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig) -> AugmentedPyramid {
        let c = cfg.pyramid_channels;
        let downs = (0..3).map(|_| Conv2dLayer::new(rng, c, c, 3, 2, 1)).collect();
        let posts = (0..3).map(|_| Conv2dLayer::new(rng, c, c, 3, 1, 1)).collect();
        AugmentedPyramid { downs, posts, relu: cfg.augment_relu }
    }

    pub fn forward(&self, top_down: &FeaturePyramid) -> Result<FeaturePyramid> {
        if top_down.kind != PyramidKind::TopDown {
            return Err(Error::ShapeMismatch(
                "augmentation expects the top-down pyramid".into(),
            ));
        }
        let act = |t: Tensor| if self.relu { t.relu() } else { t };
        // The finest level is adopted unchanged.
        let mut levels = vec![top_down.levels[0].clone()];
        for i in 0..3 {
            let down = act(self.downs[i].forward(levels.last().unwrap())?);
            let merged = down.add(&top_down.levels[i + 1])?;
            levels.push(act(self.posts[i].forward(&merged)?));
        }
        Ok(FeaturePyramid { kind: PyramidKind::Augmented, levels })
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, d) in self.downs.iter().enumerate() {
            d.collect(&format!("augment.down{}", i + MIN_LEVEL + 1), out);
        }
        for (i, p) in self.posts.iter().enumerate() {
            p.collect(&format!("augment.post{}", i + MIN_LEVEL + 1), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone_widths = vec![4, 8, 8, 16];
        cfg.pyramid_channels = 6;
        cfg
    }

    fn build(side: usize) -> (FeaturePyramid, FeaturePyramid) {
        let cfg = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bb = Backbone::new(&mut rng, &cfg);
        let td = TopDownPyramid::new(&mut rng, &cfg);
        let aug = AugmentedPyramid::new(&mut rng, &cfg);
        let image = Tensor::new(
            &[1, side, side],
            (0..side * side).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let maps = bb.forward(&image).unwrap();
        let p = td.forward(&maps).unwrap();
        let s = aug.forward(&p).unwrap();
        (p, s)
    }

    #[test]
    fn level_shapes_halve_with_level() {
        let (p, s) = build(64);
        for (pyr, kind) in [(&p, PyramidKind::TopDown), (&s, PyramidKind::Augmented)] {
            assert_eq!(pyr.kind, kind);
            for k in MIN_LEVEL..=MAX_LEVEL {
                let side = 64 / FeaturePyramid::stride(k);
                assert_eq!(pyr.level(k).unwrap().shape(), &[6, side, side], "level {k}");
            }
        }
    }

    #[test]
    fn augmented_base_is_the_same_map() {
        let (p, s) = build(64);
        // Same tensor, not merely equal values.
        assert_eq!(p.level(2).unwrap().id(), s.level(2).unwrap().id());
        assert_eq!(p.level(2).unwrap().to_vec(), s.level(2).unwrap().to_vec());
    }

    #[test]
    fn coarser_augmented_levels_differ_from_top_down() {
        let (p, s) = build(64);
        for k in 3..=5 {
            assert_ne!(
                p.level(k).unwrap().to_vec(),
                s.level(k).unwrap().to_vec(),
                "level {k} should be reprocessed"
            );
        }
    }

    #[test]
    fn level_bounds_are_enforced() {
        let (p, _) = build(64);
        assert!(p.level(1).is_err());
        assert!(p.level(6).is_err());
    }

    #[test]
    fn augmenting_an_augmented_pyramid_is_rejected() {
        let cfg = cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let aug = AugmentedPyramid::new(&mut rng, &cfg);
        let fake = FeaturePyramid {
            kind: PyramidKind::Augmented,
            levels: vec![Tensor::zeros(&[6, 4, 4]); 4],
        };
        assert!(aug.forward(&fake).is_err());
    }
}
