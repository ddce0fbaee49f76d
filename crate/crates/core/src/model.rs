//! The full detector: backbone, pyramids, proposal head, per-region
//! fusion, dependencies blocks and prediction heads, wired for both
//! training (loss over sampled anchors and regions) and inference
//! (scored, refined, suppressed detections).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::anchors::pyramid_anchors;
use crate::backbone::Backbone;
use crate::boxes::BBox;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dc::DependenciesBlock;
use crate::error::{Error, Result};
use crate::fusion::{enlarge_box, FusedDescriptor, Origin, RegionFusion};
use crate::heads::{BoxHead, ScoreHead};
use crate::metrics::Detection;
use crate::pyramid::{AugmentedPyramid, FeaturePyramid, TopDownPyramid};
use crate::rpn::{
    decode_delta, decode_proposals, nms, RpnHead, SampledAnchor, MAX_DECODE_LOG_SCALE,
};
use crate::tensor::Tensor;

/// Per-term loss values of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub head_cls: f64,
    pub head_box: f64,
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total={:.6} rpn_cls={:.6} rpn_box={:.6} cls={:.6} box={:.6}",
            self.total, self.rpn_cls, self.rpn_box, self.head_cls, self.head_box
        )
    }
}

pub struct Detector {
    pub config: RunConfig,
    backbone: Backbone,
    top_down: TopDownPyramid,
    augment: Option<AugmentedPyramid>,
    rpn: RpnHead,
    fusion_original: RegionFusion,
    fusion_enlarged: RegionFusion,
    dc_enlarged: Option<DependenciesBlock>,
    dc_original: Option<DependenciesBlock>,
    score_head: ScoreHead,
    box_head: BoxHead,
    anchors: Vec<Vec<BBox>>,
}

impl Detector {
    /// Build a freshly initialized detector; weights depend only on
    /// the configuration (components are constructed in a fixed order
    /// from one seeded stream).
    pub fn new(config: &RunConfig) -> Result<Detector> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let backbone = Backbone::new(&mut rng, config);
        let top_down = TopDownPyramid::new(&mut rng, config);
        let augment =
            config.use_augmented_pyramid.then(|| AugmentedPyramid::new(&mut rng, config));
        let rpn = RpnHead::new(&mut rng, config);
        let fusion_original = RegionFusion::new(&mut rng, config, Origin::Original);
        let fusion_enlarged = RegionFusion::new(&mut rng, config, Origin::Enlarged);
        let dc_enlarged =
            config.use_dc_module.then(|| DependenciesBlock::new(&mut rng, config, Origin::Enlarged));
        let dc_original =
            config.dc_on_b.then(|| DependenciesBlock::new(&mut rng, config, Origin::Original));
        let score_head = ScoreHead::new(&mut rng, config);
        let box_head = BoxHead::new(&mut rng, config);
        let anchors = pyramid_anchors(config)?;
        Ok(Detector {
            config: config.clone(),
            backbone,
            top_down,
            augment,
            rpn,
            fusion_original,
            fusion_enlarged,
            dc_enlarged,
            dc_original,
            score_head,
            box_head,
            anchors,
        })
    }

    /// All trainable weights, in a fixed order, with stable names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.backbone.collect(&mut out);
        self.top_down.collect(&mut out);
        if let Some(a) = &self.augment {
            a.collect(&mut out);
        }
        self.rpn.collect(&mut out);
        self.fusion_original.collect("fusion.original", &mut out);
        self.fusion_enlarged.collect("fusion.enlarged", &mut out);
        if let Some(dc) = &self.dc_enlarged {
            dc.collect("dependencies.enlarged", &mut out);
        }
        if let Some(dc) = &self.dc_original {
            dc.collect("dependencies.original", &mut out);
        }
        self.score_head.collect(&mut out);
        self.box_head.collect(&mut out);
        out
    }

    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint {
        let weights = self
            .named_parameters()
            .into_iter()
            .map(|(name, t)| (name, (t.shape().to_vec(), t.to_vec())))
            .collect();
        Checkpoint { iteration, config: self.config.clone(), weights }
    }

    /// Overwrite weights from a checkpoint. Every parameter must be
    /// present with the right shape, and nothing extra may remain.
    pub fn apply_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        let params = self.named_parameters();
        if ckpt.weights.len() != params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint has {} weights, model has {}",
                ckpt.weights.len(),
                params.len()
            )));
        }
        for (name, p) in params {
            let (shape, values) = ckpt
                .weights
                .get(&name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing weight {name}")))?;
            if shape != p.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "weight {name} has shape {shape:?}, model wants {:?}",
                    p.shape()
                )));
            }
            p.set_data(values.clone())?;
        }
        Ok(())
    }

    /// Rebuild a detector from a stored checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Detector> {
        let model = Detector::new(&ckpt.config)?;
        model.apply_checkpoint(ckpt)?;
        Ok(model)
    }

    pub fn anchors(&self) -> &[Vec<BBox>] {
        &self.anchors
    }

    /// Backbone + pyramids; returns the pyramid the heads read.
    pub fn forward_features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let s = image.shape();
        let side = self.config.image_side;
        if s != [1, side, side] {
            return Err(Error::ShapeMismatch(format!(
                "configured for [1,{side},{side}] images, got {s:?}"
            )));
        }
        let maps = self.backbone.forward(image)?;
        let p = self.top_down.forward(&maps)?;
        match &self.augment {
            Some(a) => a.forward(&p),
            None => Ok(p),
        }
    }

    fn original_descriptor(&self, pyr: &FeaturePyramid, b: &BBox) -> Result<FusedDescriptor> {
        let d = self.fusion_original.forward(pyr, b, &self.config)?;
        match &self.dc_original {
            Some(dc) => dc.attach(&d),
            None => Ok(d),
        }
    }

    fn enlarged_descriptor(&self, pyr: &FeaturePyramid, b: &BBox) -> Result<FusedDescriptor> {
        let grown = enlarge_box(b, &self.config, self.config.image_side as f64)?;
        let d = self.fusion_enlarged.forward(pyr, &grown, &self.config)?;
        match &self.dc_enlarged {
            Some(dc) => dc.attach(&d),
            None => Ok(d),
        }
    }

    // -----------------------------------------------------------------
    // Inference

    /// Detect lesions in one image: propose, score original-box
    /// descriptors, refine boxes from enlarged-box descriptors, then
    /// suppress. Detections below `eval_score_floor` are dropped.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let pyr = self.forward_features(image)?;
        let rpn_outputs = self.rpn.forward_pyramid(&pyr)?;
        let side = self.config.image_side as f64;
        let proposals = decode_proposals(&rpn_outputs, &self.anchors, side, &self.config)?;
        if proposals.is_empty() {
            return Ok(Vec::new());
        }

        let originals: Vec<FusedDescriptor> = proposals
            .iter()
            .map(|p| self.original_descriptor(&pyr, &p.bbox))
            .collect::<Result<_>>()?;
        let logits = self.score_head.forward(&originals)?;
        let scores: Vec<f64> = logits.to_vec().iter().map(|&l| sigmoid(l)).collect();

        let enlarged: Vec<FusedDescriptor> = proposals
            .iter()
            .map(|p| self.enlarged_descriptor(&pyr, &p.bbox))
            .collect::<Result<_>>()?;
        let offsets = self.box_head.forward(&enlarged)?;
        let off = offsets.to_vec();

        let mut candidates = Vec::with_capacity(proposals.len());
        for (i, p) in proposals.iter().enumerate() {
            if scores[i] < self.config.eval_score_floor {
                continue;
            }
            let delta = [off[i * 4], off[i * 4 + 1], off[i * 4 + 2], off[i * 4 + 3]];
            let refined = decode_delta(&p.bbox, &delta, Some(MAX_DECODE_LOG_SCALE))?;
            let Some(clipped) = refined.clip(side, side) else {
                continue;
            };
            candidates.push(Detection { bbox: clipped, score: scores[i] });
        }

        let kept = nms(&candidates, self.config.final_nms_iou, self.config.post_nms_k);
        Ok(kept.into_iter().map(|i| candidates[i]).collect())
    }

    // -----------------------------------------------------------------
    // Training

    /// One training step's loss graph for an image and its lesions.
    /// Returns the scalar loss tensor (for backprop) and the values of
    /// each term. The proposal-head terms always exist; the region-head
    /// terms are zero when no regions could be sampled.
    pub fn training_loss(
        &self,
        image: &Tensor,
        gts: &[BBox],
        rng: &mut impl Rng,
    ) -> Result<(Tensor, LossBreakdown)> {
        let pyr = self.forward_features(image)?;
        let rpn_outputs = self.rpn.forward_pyramid(&pyr)?;
        let side = self.config.image_side as f64;

        // ---- proposal-head losses over sampled anchors
        let sampled = crate::rpn::assign_anchor_targets(&self.anchors, gts, &self.config, rng);
        let (rpn_cls, rpn_box) = self.rpn_losses(&rpn_outputs, &sampled)?;

        // ---- region sampling from decoded proposals
        let proposals = decode_proposals(&rpn_outputs, &self.anchors, side, &self.config)?;
        let rois = crate::rpn::sample_rois(&proposals, gts, &self.config, rng);

        let mut head_cls: Option<Tensor> = None;
        let mut head_box: Option<Tensor> = None;
        if !rois.is_empty() {
            let descriptors: Vec<FusedDescriptor> = rois
                .iter()
                .map(|r| self.original_descriptor(&pyr, &r.bbox))
                .collect::<Result<_>>()?;
            let logits = self.score_head.forward(&descriptors)?;
            let labels: Vec<f64> =
                rois.iter().map(|r| if r.positive { 1.0 } else { 0.0 }).collect();
            head_cls = Some(logits.bce_with_logits(&labels)?.mean_all());

            let positives: Vec<_> = rois.iter().filter(|r| r.positive).collect();
            if !positives.is_empty() {
                let enlarged: Vec<FusedDescriptor> = positives
                    .iter()
                    .map(|r| self.enlarged_descriptor(&pyr, &r.bbox))
                    .collect::<Result<_>>()?;
                let offsets = self.box_head.forward(&enlarged)?;
                let flat = offsets.reshape(&[positives.len() * 4])?;
                let targets: Vec<f64> = positives
                    .iter()
                    .flat_map(|r| r.box_target.expect("positives carry targets"))
                    .collect();
                head_box = Some(
                    flat.smooth_l1(&targets)?
                        .sum_all()
                        .scale(1.0 / positives.len() as f64),
                );
            }
        }

        // ---- unweighted sum of the terms that exist
        let mut total = rpn_cls.add(&rpn_box)?;
        if let Some(t) = &head_cls {
            total = total.add(t)?;
        }
        if let Some(t) = &head_box {
            total = total.add(t)?;
        }

        let breakdown = LossBreakdown {
            total: total.item(),
            rpn_cls: rpn_cls.item(),
            rpn_box: rpn_box.item(),
            head_cls: head_cls.map_or(0.0, |t| t.item()),
            head_box: head_box.map_or(0.0, |t| t.item()),
        };
        Ok((total, breakdown))
    }

    /// Classification and box losses of the proposal head for a batch
    /// of sampled anchors, grouped per level so each level's output
    /// tensor is gathered once.
    fn rpn_losses(
        &self,
        rpn_outputs: &[(Tensor, Tensor)],
        sampled: &[SampledAnchor],
    ) -> Result<(Tensor, Tensor)> {
        let mut cls_sum: Option<Tensor> = None;
        let mut box_sum: Option<Tensor> = None;
        let mut total_sampled = 0usize;
        let mut total_pos = 0usize;

        for (lvl, (obj, deltas)) in rpn_outputs.iter().enumerate() {
            let here: Vec<&SampledAnchor> = sampled.iter().filter(|s| s.level == lvl).collect();
            if here.is_empty() {
                continue;
            }
            total_sampled += here.len();

            let indices: Vec<usize> = here.iter().map(|s| s.index).collect();
            let labels: Vec<f64> =
                here.iter().map(|s| if s.positive { 1.0 } else { 0.0 }).collect();
            let level_cls = obj.gather(&indices)?.bce_with_logits(&labels)?.sum_all();
            cls_sum = Some(match cls_sum {
                Some(acc) => acc.add(&level_cls)?,
                None => level_cls,
            });

            // Box loss on this level's positives.
            let positives: Vec<&&SampledAnchor> =
                here.iter().filter(|s| s.positive).collect();
            if positives.is_empty() {
                continue;
            }
            total_pos += positives.len();
            let plane = obj.numel() / self.config.anchors_per_position();
            let mut delta_indices = Vec::with_capacity(positives.len() * 4);
            let mut targets = Vec::with_capacity(positives.len() * 4);
            for s in &positives {
                let (shape_idx, pos) = (s.index / plane, s.index % plane);
                for c in 0..4 {
                    delta_indices.push((shape_idx * 4 + c) * plane + pos);
                }
                targets.extend_from_slice(&s.box_target.expect("positives carry targets"));
            }
            let level_box = deltas.gather(&delta_indices)?.smooth_l1(&targets)?.sum_all();
            box_sum = Some(match box_sum {
                Some(acc) => acc.add(&level_box)?,
                None => level_box,
            });
        }

        let cls = match cls_sum {
            Some(t) => t.scale(1.0 / total_sampled.max(1) as f64),
            None => {
                return Err(Error::ShapeMismatch(
                    "no anchors were sampled for the proposal loss".into(),
                ))
            }
        };
        let boxl = match box_sum {
            Some(t) => t.scale(1.0 / total_pos.max(1) as f64),
            None => Tensor::zeros(&[1]),
        };
        Ok((cls, boxl))
    }

    /// One full optimization step: build the loss, backpropagate, and
    /// let the caller's optimizer consume the gradients.
    pub fn backward_step(
        &self,
        image: &Tensor,
        gts: &[BBox],
        rng: &mut impl Rng,
    ) -> Result<LossBreakdown> {
        let (total, breakdown) = self.training_loss(image, gts, rng)?;
        total.backward()?;
        Ok(breakdown)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
