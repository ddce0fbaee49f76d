//! Convolutional backbone: four stages of 3x3 conv + ReLU blocks that
//! downsample a grayscale image to feature maps at strides 4, 8, 16
//! and 32. Stage indices follow the pyramid convention: stage `k`
//! produces the stride-`2^k` map, k in 2..=5.

use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::tensor::Tensor;

pub struct Backbone {
    /// `stages[0]` maps the image to the stride-4 features (two
    /// stride-2 blocks up front); each later stage halves once more.
    stages: Vec<Vec<Conv2dLayer>>,
}

impl Backbone {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig) -> Backbone {
        let widths = &cfg.backbone_widths;
        let mut stages = Vec::with_capacity(4);
        for (si, &width) in widths.iter().enumerate() {
            let in_ch = if si == 0 { 1 } else { widths[si - 1] };
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for bi in 0..cfg.blocks_per_stage {
                // The first stage applies two stride-2 blocks (total
                // stride 4); later stages halve in their first block.
                let stride = if (si == 0 && bi < 2) || (si > 0 && bi == 0) { 2 } else { 1 };
                let ic = if bi == 0 { in_ch } else { width };
                blocks.push(Conv2dLayer::new(rng, ic, width, 3, stride, 1));
            }
            stages.push(blocks);
        }
        Backbone { stages }
    }

    /// Image `[1, H, W]` -> maps at strides 4/8/16/32, index 0 = stride 4.
    pub fn forward(&self, image: &Tensor) -> Result<[Tensor; 4]> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backbone wants a [1,H,W] image, got {s:?}"
            )));
        }
        let (h, w) = (s[1], s[2]);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image sides {h}x{w} must be positive multiples of 32"
            )));
        }

        let mut x = image.clone();
        let mut maps = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?.relu();
            }
            maps.push(x.clone());
        }
        Ok(maps.try_into().map_err(|_| Error::ShapeMismatch("backbone stages".into())).unwrap())
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.collect(&format!("backbone.stage{}.block{bi}", si + 2), out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.backbone_widths = vec![4, 8, 8, 16];
        cfg
    }

    #[test]
    fn strides_are_4_8_16_32() {
        let cfg = small_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &cfg);
        let image = Tensor::zeros(&[1, 64, 96]);
        let maps = bb.forward(&image).unwrap();
        assert_eq!(maps[0].shape(), &[4, 16, 24]);
        assert_eq!(maps[1].shape(), &[8, 8, 12]);
        assert_eq!(maps[2].shape(), &[8, 4, 6]);
        assert_eq!(maps[3].shape(), &[16, 2, 3]);
    }

    #[test]
    fn rejects_unaligned_sides() {
        let cfg = small_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &cfg);
        assert!(bb.forward(&Tensor::zeros(&[1, 100, 96])).is_err());
        assert!(bb.forward(&Tensor::zeros(&[2, 64, 64])).is_err());
    }

    #[test]
    fn parameter_names_cover_all_blocks() {
        let cfg = small_cfg();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut rng, &cfg);
        let mut params = Vec::new();
        bb.collect(&mut params);
        // 4 stages x 2 blocks x (weight, bias).
        assert_eq!(params.len(), 16);
        assert!(params.iter().any(|(n, _)| n == "backbone.stage2.block0.weight"));
        assert!(params.iter().any(|(n, _)| n == "backbone.stage5.block1.bias"));
    }
}
