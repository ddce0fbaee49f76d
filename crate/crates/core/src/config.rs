//! Run configuration: every tunable of the model, the proposal stage,
//! the training recipe and evaluation, with the standard recipe as
//! defaults.
//!
//! Config files are flat `key = value` text (TOML grammar, no tables).
//! Unknown keys are rejected so typos cannot silently fall back to
//! defaults. A configuration has a stable content hash used to bind
//! checkpoints to the settings that produced them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for weight init, sampling and augmentation choices.
    pub seed: u64,

    // -- model dimensions --
    /// Input side in pixels; must be divisible by 32.
    pub image_side: usize,
    /// Channel widths of the four backbone stages (strides 4/8/16/32).
    pub backbone_widths: Vec<usize>,
    /// Conv+ReLU blocks per backbone stage (>= 2).
    pub blocks_per_stage: usize,
    /// Channels of every pyramid level, both top-down and augmented.
    pub pyramid_channels: usize,
    /// Channels of a fused region descriptor.
    pub descriptor_channels: usize,
    /// Inner width of the dependencies block (f/g/h projections).
    pub dc_mid_channels: usize,
    /// Hidden width of the score/box heads.
    pub head_hidden: usize,
    /// Apply ReLU after each conv on the bottom-up augmentation path.
    pub augment_relu: bool,

    // -- component switches (ablation) --
    /// Build the bottom-up augmented pyramid (else heads read the
    /// top-down pyramid directly).
    pub use_augmented_pyramid: bool,
    /// Fuse three neighboring levels per region (else pool one level).
    pub use_adaptive_fusion: bool,
    /// Apply the dependencies block to enlarged-region descriptors.
    pub use_dc_module: bool,
    /// Also apply an independent dependencies block to original-region
    /// descriptors.
    pub dc_on_b: bool,

    // -- pyramid level assignment --
    /// Offset k0 in `k = floor(k0 + log2(sqrt(area) / canonical))`.
    pub level_offset: f64,
    /// Canonical box size mapping to the top level.
    pub level_canonical_size: f64,
    /// Clamp bounds of the assigned level (3..=4 so that the level
    /// below and above always exist in a 2..=5 pyramid).
    pub level_min: usize,
    pub level_max: usize,

    // -- region enlargement and pooling --
    /// Width/height scale of the enlarged context region.
    pub enlarge_w: f64,
    pub enlarge_h: f64,
    /// Output side of region pooling.
    pub roi_pool_size: usize,

    // -- anchors --
    /// Anchor areas in square pixels.
    pub anchor_areas: Vec<f64>,
    /// Anchor aspect ratios as height/width.
    pub anchor_ratios: Vec<f64>,

    // -- proposal selection --
    /// Top scoring anchors kept before suppression.
    pub pre_nms_k: usize,
    /// Suppression overlap threshold for proposals.
    pub nms_iou: f64,
    /// Proposals kept after suppression.
    pub post_nms_k: usize,
    /// Suppression overlap for final detections.
    pub final_nms_iou: f64,
    /// Operating score threshold for reported detections.
    pub score_threshold: f64,
    /// Detections below this score are discarded before curves are
    /// computed (keeps ROC/FROC sweeps finite).
    pub eval_score_floor: f64,

    // -- proposal-head training targets --
    /// Anchor IOU at or above which an anchor is a positive example.
    pub rpn_pos_iou: f64,
    /// Anchor IOU below which an anchor is a negative example.
    pub rpn_neg_iou: f64,
    /// Anchors sampled per step for the proposal-head loss.
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,

    // -- region sampling --
    /// Regions sampled per training step.
    pub rois_per_step: usize,
    /// Target fraction of positives among sampled regions.
    pub roi_pos_fraction: f64,
    /// Region IOU at or above which a region counts as positive.
    pub roi_pos_iou: f64,
    /// Mix ground-truth boxes into the proposal pool while training so
    /// the heads see positives from the first iteration.
    pub append_gt_proposals: bool,

    // -- training schedule --
    pub iterations: u64,
    /// Learning rate of each phase.
    pub lr_values: Vec<f64>,
    /// Relative lengths of the three phases.
    pub lr_phase_ratios: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random flip augmentation during training.
    pub flip_augment: bool,
    /// Emit a loss record every this many iterations.
    pub log_every: u64,

    // -- evaluation --
    /// Detections match ground truth only above this IOU (strictly).
    pub match_iou: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            image_side: 256,
            backbone_widths: vec![32, 64, 128, 256],
            blocks_per_stage: 2,
            pyramid_channels: 256,
            descriptor_channels: 512,
            dc_mid_channels: 256,
            head_hidden: 256,
            augment_relu: true,
            use_augmented_pyramid: true,
            use_adaptive_fusion: true,
            use_dc_module: true,
            dc_on_b: false,
            level_offset: 5.0,
            level_canonical_size: 224.0,
            level_min: 3,
            level_max: 4,
            enlarge_w: 1.2,
            enlarge_h: 1.2,
            roi_pool_size: 14,
            anchor_areas: vec![256.0, 1024.0, 4096.0, 16384.0, 65536.0],
            anchor_ratios: vec![1.0, 2.0 / 3.0, 1.5, 0.5, 2.0],
            pre_nms_k: 1000,
            nms_iou: 0.7,
            post_nms_k: 100,
            final_nms_iou: 0.5,
            score_threshold: 0.5,
            eval_score_floor: 0.05,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            rois_per_step: 512,
            roi_pos_fraction: 0.5,
            roi_pos_iou: 0.5,
            append_gt_proposals: true,
            iterations: 6000,
            lr_values: vec![1e-3, 1e-4, 1e-5],
            lr_phase_ratios: vec![3.0, 2.0, 1.0],
            momentum: 0.9,
            weight_decay: 1e-4,
            flip_augment: true,
            log_every: 100,
            match_iou: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat struct serializes")
    }

    /// Content hash binding checkpoints to their configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        format!("{digest:x}")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_side == 0 || self.image_side % 32 != 0 {
            return fail(format!(
                "image_side {} must be a positive multiple of 32",
                self.image_side
            ));
        }
        if self.backbone_widths.len() != 4 || self.backbone_widths.iter().any(|&w| w == 0) {
            return fail(format!(
                "backbone_widths {:?} must be four positive values",
                self.backbone_widths
            ));
        }
        if self.blocks_per_stage < 2 {
            return fail("blocks_per_stage must be at least 2".into());
        }
        for (name, v) in [
            ("pyramid_channels", self.pyramid_channels),
            ("descriptor_channels", self.descriptor_channels),
            ("dc_mid_channels", self.dc_mid_channels),
            ("head_hidden", self.head_hidden),
            ("roi_pool_size", self.roi_pool_size),
            ("rpn_batch", self.rpn_batch),
            ("rois_per_step", self.rois_per_step),
            ("pre_nms_k", self.pre_nms_k),
            ("post_nms_k", self.post_nms_k),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(self.level_min >= 3 && self.level_min <= self.level_max && self.level_max <= 4) {
            return fail(format!(
                "level bounds [{}, {}] must satisfy 3 <= min <= max <= 4",
                self.level_min, self.level_max
            ));
        }
        if self.level_canonical_size <= 0.0 {
            return fail("level_canonical_size must be positive".into());
        }
        if self.enlarge_w < 1.0 || self.enlarge_h < 1.0 {
            return fail("enlargement factors must be >= 1".into());
        }
        if self.anchor_areas.is_empty() || self.anchor_areas.iter().any(|&a| a <= 0.0) {
            return fail("anchor_areas must be positive".into());
        }
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|&r| r <= 0.0) {
            return fail("anchor_ratios must be positive".into());
        }
        for (name, v) in [
            ("nms_iou", self.nms_iou),
            ("final_nms_iou", self.final_nms_iou),
            ("match_iou", self.match_iou),
            ("rpn_pos_iou", self.rpn_pos_iou),
            ("rpn_neg_iou", self.rpn_neg_iou),
            ("roi_pos_iou", self.roi_pos_iou),
        ] {
            if !(0.0 < v && v < 1.0) {
                return fail(format!("{name} = {v} must lie in (0,1)"));
            }
        }
        if self.rpn_neg_iou > self.rpn_pos_iou {
            return fail("rpn_neg_iou must not exceed rpn_pos_iou".into());
        }
        for (name, v) in [
            ("rpn_pos_fraction", self.rpn_pos_fraction),
            ("roi_pos_fraction", self.roi_pos_fraction),
        ] {
            if !(0.0 < v && v < 1.0) {
                return fail(format!("{name} = {v} must lie in (0,1)"));
            }
        }
        if !(0.0..1.0).contains(&self.score_threshold) {
            return fail("score_threshold must lie in [0,1)".into());
        }
        if !(0.0..1.0).contains(&self.eval_score_floor) {
            return fail("eval_score_floor must lie in [0,1)".into());
        }
        if self.lr_values.len() != 3 || self.lr_values.iter().any(|&v| v <= 0.0) {
            return fail("lr_values must be three positive rates".into());
        }
        if self.lr_phase_ratios.len() != 3 || self.lr_phase_ratios.iter().any(|&v| v <= 0.0) {
            return fail("lr_phase_ratios must be three positive weights".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0,1)".into());
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if self.log_every == 0 {
            return fail("log_every must be positive".into());
        }
        Ok(())
    }

    /// Anchor shapes per grid position.
    pub fn anchors_per_position(&self) -> usize {
        self.anchor_areas.len() * self.anchor_ratios.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.lr_values, vec![1e-3, 1e-4, 1e-5]);
        assert_eq!(c.lr_phase_ratios, vec![3.0, 2.0, 1.0]);
        assert_eq!(c.rois_per_step, 512);
        assert_eq!(c.roi_pos_fraction, 0.5);
        assert_eq!(c.roi_pos_iou, 0.5);
        assert_eq!(
            c.anchor_areas,
            vec![16.0 * 16.0, 32.0 * 32.0, 64.0 * 64.0, 128.0 * 128.0, 256.0 * 256.0]
        );
        assert_eq!(c.anchor_ratios.len(), 5);
        assert_eq!(c.anchors_per_position(), 25);
        assert_eq!(c.enlarge_w, 1.2);
        assert_eq!(c.enlarge_h, 1.2);
        assert_eq!(c.roi_pool_size, 14);
        assert_eq!(c.level_offset, 5.0);
        assert_eq!(c.level_canonical_size, 224.0);
        assert_eq!((c.level_min, c.level_max), (3, 4));
        assert_eq!(c.descriptor_channels, 512);
        assert_eq!(c.dc_mid_channels, 256);
        assert_eq!(c.pyramid_channels, 256);
        c.validate().unwrap();
    }

    #[test]
    fn flat_file_roundtrip_preserves_value_and_hash() {
        let mut c = RunConfig::default();
        c.iterations = 123;
        c.pyramid_channels = 16;
        let text = c.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("iterations = 10\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "got: {err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml_str("image_side = 100").is_err());
        assert!(RunConfig::from_toml_str("nms_iou = 1.5").is_err());
        assert!(RunConfig::from_toml_str("level_min = 2").is_err());
        assert!(RunConfig::from_toml_str("lr_values = [0.1]").is_err());
        assert!(RunConfig::from_toml_str("momentum = 1.0").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
    }
}
