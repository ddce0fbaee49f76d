//! Proposal stage: a shared head that scores every anchor on every
//! pyramid level and regresses box offsets, plus the pure-arithmetic
//! pieces around it — offset encoding/decoding, non-maximum
//! suppression, proposal decoding, and the target assignment and
//! sampling used during training.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::BBox;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{iou, Detection};
use crate::nn::Conv2dLayer;
use crate::pyramid::FeaturePyramid;
use crate::tensor::Tensor;

/// Largest allowed `dw`/`dh` when decoding: exp(4.135) ~ 62.5x, which
/// keeps pathological regressions from producing astronomically large
/// boxes. Raw encode/decode round-trips are exact below this bound.
pub const MAX_DECODE_LOG_SCALE: f64 = 4.135;

/// Minimum side of a decoded proposal after clipping, in pixels.
const MIN_PROPOSAL_SIDE: f64 = 1.0;

// ---------------------------------------------------------------------------
// Offset transform

/// Offsets `(dx, dy, dw, dh)` that move `base` onto `target`.
pub fn encode_delta(base: &BBox, target: &BBox) -> [f64; 4] {
    let (bcx, bcy) = base.center();
    let (tcx, tcy) = target.center();
    [
        (tcx - bcx) / base.width(),
        (tcy - bcy) / base.height(),
        (target.width() / base.width()).ln(),
        (target.height() / base.height()).ln(),
    ]
}

/// Apply offsets to a base box. `clamp_log_scale` bounds `dw`/`dh`
/// (used when decoding raw head outputs; `None` for exact round-trips).
pub fn decode_delta(base: &BBox, delta: &[f64; 4], clamp_log_scale: Option<f64>) -> Result<BBox> {
    let (bcx, bcy) = base.center();
    let (mut dw, mut dh) = (delta[2], delta[3]);
    if let Some(limit) = clamp_log_scale {
        dw = dw.clamp(-limit, limit);
        dh = dh.clamp(-limit, limit);
    }
    let cx = bcx + delta[0] * base.width();
    let cy = bcy + delta[1] * base.height();
    let w = base.width() * dw.exp();
    let h = base.height() * dh.exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

// ---------------------------------------------------------------------------
// Non-maximum suppression

/// Greedy suppression: walk detections best-first (ties broken by box
/// corners so the result is reproducible) and keep each one whose IOU
/// with everything already kept is at most `iou_threshold`. Returns
/// indices into the input, at most `keep_at_most` of them.
pub fn nms(dets: &[Detection], iou_threshold: f64, keep_at_most: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                dets[i]
                    .bbox
                    .corners()
                    .iter()
                    .zip(dets[j].bbox.corners())
                    .find_map(|(a, b)| a.partial_cmp(&b).filter(|o| o.is_ne()))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= keep_at_most {
            break;
        }
        if kept.iter().all(|&k| iou(&dets[i].bbox, &dets[k].bbox) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

// ---------------------------------------------------------------------------
// Head

/// Shared proposal head applied to every pyramid level: a 3x3 conv +
/// ReLU feeding two 1x1 siblings — per-anchor objectness logits
/// (`[A, H, W]`) and per-anchor box offsets (`[4A, H, W]`, channel
/// `a*4 + c` holding component `c` of anchor `a`).
pub struct RpnHead {
    shared: Conv2dLayer,
    objectness: Conv2dLayer,
    offsets: Conv2dLayer,
}

impl RpnHead {
    pub fn new(rng: &mut impl Rng, cfg: &RunConfig) -> RpnHead {
        let c = cfg.pyramid_channels;
        let a = cfg.anchors_per_position();
        RpnHead {
            shared: Conv2dLayer::new(rng, c, c, 3, 1, 1),
            objectness: Conv2dLayer::with_std(rng, c, a, 1, 1, 0, 0.01, true),
            offsets: Conv2dLayer::with_std(rng, c, 4 * a, 1, 1, 0, 0.01, true),
        }
    }

    /// One level's map -> (objectness logits, box offsets).
    pub fn forward(&self, level_map: &Tensor) -> Result<(Tensor, Tensor)> {
        let shared = self.shared.forward(level_map)?.relu();
        Ok((self.objectness.forward(&shared)?, self.offsets.forward(&shared)?))
    }

    /// All levels of a pyramid, fine to coarse.
    pub fn forward_pyramid(&self, pyr: &FeaturePyramid) -> Result<Vec<(Tensor, Tensor)>> {
        pyr.levels.iter().map(|m| self.forward(m)).collect()
    }

    pub fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.shared.collect("rpn.shared", out);
        self.objectness.collect("rpn.objectness", out);
        self.offsets.collect("rpn.offsets", out);
    }
}

// ---------------------------------------------------------------------------
// Proposal decoding

#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

/// Turn raw head outputs into scored, clipped, suppressed proposals.
///
/// The top `pre_nms_k` anchors are chosen globally across levels by
/// score; their offsets are decoded (log-scales clamped), the boxes are
/// clipped to the image and degenerate slivers are dropped; suppression
/// then keeps at most `post_nms_k`.
pub fn decode_proposals(
    level_outputs: &[(Tensor, Tensor)],
    anchors: &[Vec<BBox>],
    image_side: f64,
    cfg: &RunConfig,
) -> Result<Vec<Proposal>> {
    if level_outputs.len() != anchors.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} levels of head output vs {} levels of anchors",
            level_outputs.len(),
            anchors.len()
        )));
    }

    // (logit, level, flat index); logits order the same way as scores.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (lvl, (obj, _)) in level_outputs.iter().enumerate() {
        let logits = obj.data();
        if logits.len() != anchors[lvl].len() {
            return Err(Error::ShapeMismatch(format!(
                "level {lvl}: {} logits vs {} anchors",
                logits.len(),
                anchors[lvl].len()
            )));
        }
        for (i, &l) in logits.iter().enumerate() {
            candidates.push((l, lvl, i));
        }
    }
    // Total order: logit descending, ties broken by (level, index) so
    // the selection is fully deterministic. Only the top pre_nms_k ever
    // matter, so select them first and sort just that prefix.
    let rank = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    };
    let keep = cfg.pre_nms_k.min(candidates.len());
    if keep < candidates.len() {
        candidates.select_nth_unstable_by(keep, rank);
        candidates.truncate(keep);
    }
    candidates.sort_by(rank);

    let mut decoded: Vec<Detection> = Vec::with_capacity(candidates.len());
    for &(logit, lvl, idx) in &candidates {
        let deltas = level_outputs[lvl].1.data();
        let plane = anchors[lvl].len() / cfg.anchors_per_position();
        let (shape_idx, pos) = (idx / plane, idx % plane);
        let at = |c: usize| deltas[(shape_idx * 4 + c) * plane + pos];
        let delta = [at(0), at(1), at(2), at(3)];
        drop(deltas);

        let raw = decode_delta(&anchors[lvl][idx], &delta, Some(MAX_DECODE_LOG_SCALE))?;
        let Some(clipped) = raw.clip(image_side, image_side) else {
            continue;
        };
        if clipped.width() < MIN_PROPOSAL_SIDE || clipped.height() < MIN_PROPOSAL_SIDE {
            continue;
        }
        decoded.push(Detection { bbox: clipped, score: sigmoid(logit) });
    }

    let kept = nms(&decoded, cfg.nms_iou, cfg.post_nms_k);
    Ok(kept
        .into_iter()
        .map(|i| Proposal { bbox: decoded[i].bbox, score: decoded[i].score })
        .collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Training targets: anchors

/// One anchor chosen for the proposal-head loss.
#[derive(Clone, Copy, Debug)]
pub struct SampledAnchor {
    /// Pyramid-array index (0 = finest level).
    pub level: usize,
    /// Flat anchor index within the level.
    pub index: usize,
    pub positive: bool,
    /// Offsets to the matched lesion box; positives only.
    pub box_target: Option<[f64; 4]>,
}

/// Label anchors against ground truth and sample a training batch.
///
/// Positives: anchors overlapping some box at `rpn_pos_iou` or more,
/// plus every anchor tied for best overlap with each box (so no box
/// goes unclaimed). Negatives: overlap below `rpn_neg_iou`. Anchors in
/// between are ignored. Up to `rpn_batch * rpn_pos_fraction` positives
/// are drawn, negatives fill the rest of the batch.
pub fn assign_anchor_targets(
    anchors: &[Vec<BBox>],
    gts: &[BBox],
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Vec<SampledAnchor> {
    // Per-anchor best overlap, flattened over (level, index).
    let mut positives: Vec<(usize, usize, usize)> = Vec::new(); // (level, idx, gt)
    let mut negatives: Vec<(usize, usize)> = Vec::new();

    if gts.is_empty() {
        for (lvl, level_anchors) in anchors.iter().enumerate() {
            negatives.extend((0..level_anchors.len()).map(|i| (lvl, i)));
        }
    } else {
        // Track the best overlap each box achieves anywhere, to promote
        // its best anchors even below the positive threshold.
        let mut gt_best = vec![0.0_f64; gts.len()];
        let mut overlaps: Vec<Vec<(f64, usize)>> = Vec::with_capacity(anchors.len());
        for level_anchors in anchors {
            let mut level_best = Vec::with_capacity(level_anchors.len());
            for a in level_anchors {
                let (mut best_v, mut best_g) = (0.0, 0usize);
                for (gi, gt) in gts.iter().enumerate() {
                    let v = iou(a, gt);
                    if v > best_v {
                        best_v = v;
                        best_g = gi;
                    }
                    if v > gt_best[gi] {
                        gt_best[gi] = v;
                    }
                }
                level_best.push((best_v, best_g));
            }
            overlaps.push(level_best);
        }

        for (lvl, level_best) in overlaps.iter().enumerate() {
            for (i, &(v, g)) in level_best.iter().enumerate() {
                if v >= cfg.rpn_pos_iou || (v > 0.0 && v == gt_best[g]) {
                    positives.push((lvl, i, g));
                } else if v < cfg.rpn_neg_iou {
                    negatives.push((lvl, i));
                }
            }
        }
    }

    let pos_quota =
        ((cfg.rpn_batch as f64 * cfg.rpn_pos_fraction).round() as usize).min(positives.len());
    positives.partial_shuffle(rng, pos_quota);
    positives.truncate(pos_quota);
    let neg_quota = (cfg.rpn_batch - pos_quota).min(negatives.len());
    negatives.partial_shuffle(rng, neg_quota);
    negatives.truncate(neg_quota);

    let mut sampled = Vec::with_capacity(positives.len() + negatives.len());
    for (lvl, i, g) in positives {
        sampled.push(SampledAnchor {
            level: lvl,
            index: i,
            positive: true,
            box_target: Some(encode_delta(&anchors[lvl][i], &gts[g])),
        });
    }
    for (lvl, i) in negatives {
        sampled.push(SampledAnchor { level: lvl, index: i, positive: false, box_target: None });
    }
    sampled
}

// ---------------------------------------------------------------------------
// Training targets: regions

/// One region chosen for the head losses.
#[derive(Clone, Copy, Debug)]
pub struct SampledRoi {
    pub bbox: BBox,
    pub positive: bool,
    /// Offsets to the matched lesion box; positives only.
    pub box_target: Option<[f64; 4]>,
}

/// Label proposals against ground truth and sample regions for the
/// second stage. Ground-truth boxes join the pool when configured, so
/// positives exist from the first iteration. If one side of the
/// positive/negative split runs short, the other fills the deficit.
pub fn sample_rois(
    proposals: &[Proposal],
    gts: &[BBox],
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Vec<SampledRoi> {
    let mut pool: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    if cfg.append_gt_proposals {
        pool.extend_from_slice(gts);
    }

    let mut positives: Vec<(BBox, usize)> = Vec::new();
    let mut negatives: Vec<BBox> = Vec::new();
    for b in pool {
        let best = gts
            .iter()
            .enumerate()
            .map(|(gi, gt)| (gi, iou(&b, gt)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        match best {
            Some((gi, v)) if v >= cfg.roi_pos_iou => positives.push((b, gi)),
            _ => negatives.push(b),
        }
    }

    let pos_quota =
        ((cfg.rois_per_step as f64 * cfg.roi_pos_fraction).round() as usize).min(positives.len());
    let neg_quota = (cfg.rois_per_step - pos_quota).min(negatives.len());
    // Deficit fill: spare positives may take unused negative slots.
    let pos_quota = (cfg.rois_per_step - neg_quota).min(positives.len());

    positives.partial_shuffle(rng, pos_quota);
    positives.truncate(pos_quota);
    negatives.partial_shuffle(rng, neg_quota);
    negatives.truncate(neg_quota);

    let mut rois = Vec::with_capacity(pos_quota + neg_quota);
    for (b, gi) in positives {
        rois.push(SampledRoi {
            bbox: b,
            positive: true,
            box_target: Some(encode_delta(&b, &gts[gi])),
        });
    }
    for b in negatives {
        rois.push(SampledRoi { bbox: b, positive: false, box_target: None });
    }
    rois
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn encode_decode_round_trip_is_exact() {
        let base = bx(10.0, 20.0, 50.0, 44.0);
        let target = bx(14.5, 18.0, 61.0, 50.5);
        let d = encode_delta(&base, &target);
        let back = decode_delta(&base, &d, None).unwrap();
        for (a, b) in back.corners().iter().zip(target.corners()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_delta_reproduces_the_base() {
        let base = bx(3.0, 4.0, 9.0, 16.0);
        let back = decode_delta(&base, &[0.0; 4], Some(MAX_DECODE_LOG_SCALE)).unwrap();
        for (a, b) in back.corners().iter().zip(base.corners()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_clamps_runaway_scales() {
        let base = bx(0.0, 0.0, 10.0, 10.0);
        let b = decode_delta(&base, &[0.0, 0.0, 50.0, 50.0], Some(MAX_DECODE_LOG_SCALE)).unwrap();
        let limit = 10.0 * MAX_DECODE_LOG_SCALE.exp();
        assert!(b.width() <= limit * 1.0001);
    }

    #[test]
    fn nms_keeps_best_and_suppresses_overlaps() {
        let dets = vec![
            Detection { bbox: bx(0.0, 0.0, 10.0, 10.0), score: 0.9 },
            Detection { bbox: bx(1.0, 1.0, 11.0, 11.0), score: 0.8 }, // heavy overlap
            Detection { bbox: bx(30.0, 30.0, 40.0, 40.0), score: 0.7 },
        ];
        let kept = nms(&dets, 0.5, 10);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn nms_cap_limits_output() {
        let dets: Vec<Detection> = (0..5)
            .map(|i| Detection {
                bbox: bx(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0),
                score: 1.0 - 0.1 * i as f64,
            })
            .collect();
        assert_eq!(nms(&dets, 0.5, 2).len(), 2);
    }

    #[test]
    fn nms_kept_boxes_overlap_at_most_threshold() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let dets: Vec<Detection> = (0..60)
            .map(|_| {
                let x1 = rng.gen_range(0.0..80.0);
                let y1 = rng.gen_range(0.0..80.0);
                Detection {
                    bbox: bx(x1, y1, x1 + rng.gen_range(5.0..30.0), y1 + rng.gen_range(5.0..30.0)),
                    score: rng.gen_range(0.0..1.0),
                }
            })
            .collect();
        let kept = nms(&dets, 0.4, usize::MAX);
        for (ai, &a) in kept.iter().enumerate() {
            for &b in &kept[ai + 1..] {
                assert!(iou(&dets[a].bbox, &dets[b].bbox) <= 0.4);
            }
        }
    }

    #[test]
    fn anchor_assignment_promotes_best_anchor_per_box() {
        let mut cfg = RunConfig::default();
        cfg.image_side = 64;
        cfg.rpn_batch = 32;
        let anchors = crate::anchors::pyramid_anchors(&cfg).unwrap();
        // A small lesion that no anchor reaches the 0.7 threshold for.
        let gts = vec![bx(5.0, 5.0, 17.0, 19.0)];
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let sampled = assign_anchor_targets(&anchors, &gts, &cfg, &mut rng);
        let pos: Vec<_> = sampled.iter().filter(|s| s.positive).collect();
        assert!(!pos.is_empty(), "best-match promotion must yield a positive");
        for p in &pos {
            assert!(p.box_target.is_some());
        }
        assert!(sampled.len() <= cfg.rpn_batch);
    }

    #[test]
    fn anchor_assignment_without_lesions_is_all_negative() {
        let mut cfg = RunConfig::default();
        cfg.image_side = 64;
        cfg.rpn_batch = 16;
        let anchors = crate::anchors::pyramid_anchors(&cfg).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let sampled = assign_anchor_targets(&anchors, &[], &cfg, &mut rng);
        assert_eq!(sampled.len(), 16);
        assert!(sampled.iter().all(|s| !s.positive));
    }

    #[test]
    fn roi_sampling_includes_appended_ground_truth() {
        let mut cfg = RunConfig::default();
        cfg.rois_per_step = 8;
        let gts = vec![bx(10.0, 10.0, 40.0, 40.0)];
        let proposals: Vec<Proposal> = (0..6)
            .map(|i| Proposal {
                bbox: bx(100.0 + 5.0 * i as f64, 100.0, 130.0 + 5.0 * i as f64, 130.0),
                score: 0.5,
            })
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let rois = sample_rois(&proposals, &gts, &cfg, &mut rng);
        let pos: Vec<_> = rois.iter().filter(|r| r.positive).collect();
        assert_eq!(pos.len(), 1, "the appended box itself is the only positive");
        let t = pos[0].box_target.unwrap();
        assert!(t.iter().all(|v| v.abs() < 1e-12), "self-target offsets are zero");
    }

    #[test]
    fn roi_sampling_with_nothing_available_is_empty() {
        let cfg = RunConfig::default();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        assert!(sample_rois(&[], &[], &cfg, &mut rng).is_empty());
    }

    #[test]
    fn head_output_shapes_follow_anchor_count() {
        let mut cfg = RunConfig::default();
        cfg.pyramid_channels = 6;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let head = RpnHead::new(&mut rng, &cfg);
        let m = Tensor::zeros(&[6, 8, 8]);
        let (obj, deltas) = head.forward(&m).unwrap();
        assert_eq!(obj.shape(), &[25, 8, 8]);
        assert_eq!(deltas.shape(), &[100, 8, 8]);
    }

    #[test]
    fn proposals_are_clipped_suppressed_and_capped() {
        let mut cfg = RunConfig::default();
        cfg.image_side = 64;
        cfg.pyramid_channels = 4;
        cfg.pre_nms_k = 200;
        cfg.post_nms_k = 10;
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let head = RpnHead::new(&mut rng, &cfg);
        let anchors = anchors::pyramid_anchors(&cfg).unwrap();

        let mut outputs = Vec::new();
        for k in 2..=5 {
            let side = 64 >> k;
            let data: Vec<f64> =
                (0..4 * side * side).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
            let m = Tensor::new(&[4, side, side], data).unwrap();
            outputs.push(head.forward(&m).unwrap());
        }
        let proposals = decode_proposals(&outputs, &anchors, 64.0, &cfg).unwrap();
        assert!(!proposals.is_empty());
        assert!(proposals.len() <= 10);
        for p in &proposals {
            assert!(p.bbox.x1 >= 0.0 && p.bbox.y1 >= 0.0);
            assert!(p.bbox.x2 <= 64.0 && p.bbox.y2 <= 64.0);
            assert!(p.score > 0.0 && p.score < 1.0);
        }
        for (i, a) in proposals.iter().enumerate() {
            for b in &proposals[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= cfg.nms_iou + 1e-12);
            }
        }
    }
}
