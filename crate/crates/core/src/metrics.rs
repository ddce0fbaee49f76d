//! Detection quality metrics: IOU, score-ordered matching, confusion
//! ratios, ROC/AUC and FROC.
//!
//! Conventions (also stated in the evaluation report header):
//! - A detection counts as a hit only when IOU is strictly greater than
//!   the matching threshold, and each ground-truth box can be claimed by
//!   at most one detection (highest score first).
//! - Lesion-free images enter the confusion counts as image-level
//!   negatives: TN when the image has no detection above the operating
//!   threshold, FP otherwise.
//! - ROC instances are matched detection outcomes (hit = positive
//!   instance, miss = negative) plus one image-level negative per
//!   lesion-free image scored by its highest detection (0 when clean).
//! - FROC counts individual false-positive detections per scan.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Scored box produced by the detector.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Intersection over union of two boxes. 0 when disjoint, 1 when equal.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Matching outcome for one image.
#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    /// `(score, is_hit)` per detection, in descending score order.
    pub outcomes: Vec<(f64, bool)>,
    /// Score of the detection that claimed each ground-truth box.
    pub gt_hit_scores: Vec<Option<f64>>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.outcomes.iter().filter(|(_, hit)| *hit).count()
    }

    pub fn false_positives(&self) -> usize {
        self.outcomes.len() - self.true_positives()
    }

    pub fn missed_gts(&self) -> usize {
        self.gt_hit_scores.iter().filter(|s| s.is_none()).count()
    }
}

/// Total order on detections: score descending, then box corners, so
/// matching is reproducible bit-for-bit across runs.
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| {
            a.bbox
                .corners()
                .iter()
                .zip(b.bbox.corners())
                .find_map(|(x, y)| x.partial_cmp(&y).filter(|o| o.is_ne()))
                .unwrap_or(std::cmp::Ordering::Equal)
        })
}

/// Greedily match detections (best score first) against ground truth.
/// A detection claims the still-unclaimed box with the highest IOU,
/// provided that IOU is strictly above `iou_threshold`.
pub fn match_detections(
    detections: &[Detection],
    gts: &[BBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut dets = detections.to_vec();
    dets.sort_by(detection_order);

    let mut gt_hit_scores: Vec<Option<f64>> = vec![None; gts.len()];
    let mut outcomes = Vec::with_capacity(dets.len());
    for det in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_hit_scores[gi].is_some() {
                continue;
            }
            let v = iou(&det.bbox, gt);
            if v > iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_hit_scores[gi] = Some(det.score);
                outcomes.push((det.score, true));
            }
            None => outcomes.push((det.score, false)),
        }
    }
    MatchResult {
        outcomes,
        gt_hit_scores,
    }
}

/// Image-level tallies at the operating threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

/// Ratio with an explicit "undefined" state for 0/0 denominators.
pub type Ratio = Option<f64>;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub sensitivity: Ratio,
    pub specificity: Ratio,
    pub precision: Ratio,
    pub accuracy: Ratio,
}

fn ratio(num: usize, den: usize) -> Ratio {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Derive the standard ratios; any ratio whose denominator is zero is
/// reported as undefined rather than silently evaluated as 0/0.
pub fn confusion_metrics(c: &ConfusionCounts) -> ConfusionMetrics {
    ConfusionMetrics {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        precision: ratio(c.tp, c.tp + c.fp),
        accuracy: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
    }
}

/// One ROC operating point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve over scored binary instances `(score, is_positive)`.
///
/// Instances sharing a score move together (one point per distinct
/// score), so the curve and its trapezoidal area equal the
/// tie-aware Mann-Whitney statistic. Needs both classes present.
pub fn roc_points(instances: &[(f64, bool)]) -> Result<Vec<RocPoint>> {
    let pos = instances.iter().filter(|(_, p)| *p).count();
    let neg = instances.len() - pos;
    if pos == 0 {
        return Err(Error::SingleClass {
            missing: "positive",
        });
    }
    if neg == 0 {
        return Err(Error::SingleClass {
            missing: "negative",
        });
    }

    let mut sorted = instances.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        // Consume the whole tie group at this score.
        while i < sorted.len() && sorted[i].0 == score {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Area under an ROC curve by trapezoidal integration.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Convenience: curve plus its area.
pub fn roc_auc(instances: &[(f64, bool)]) -> Result<(Vec<RocPoint>, f64)> {
    let points = roc_points(instances)?;
    let area = auc(&points);
    Ok((points, area))
}

/// Detection outcomes of one scan: `(score, is_hit)` per detection plus
/// how many ground-truth lesions the scan holds.
#[derive(Clone, Debug, Default)]
pub struct ScanOutcomes {
    pub outcomes: Vec<(f64, bool)>,
    pub num_gts: usize,
}

/// One FROC operating point: sensitivity at a false-positives-per-scan
/// budget. `threshold` is the score cutoff that realizes it.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FrocPoint {
    pub rate: f64,
    pub sensitivity: f64,
    pub threshold: f64,
}

/// Default FP/scan budgets; the headline number is the mean sensitivity
/// over these seven rates.
pub const FROC_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// FROC curve: for each target rate, pick the score threshold whose
/// FP-per-scan count is the largest value still within the budget and
/// report the lesion sensitivity there.
pub fn froc(scans: &[ScanOutcomes], rates: &[f64]) -> Result<Vec<FrocPoint>> {
    if scans.is_empty() {
        return Err(Error::EmptyScanSet);
    }
    let total_gts: usize = scans.iter().map(|s| s.num_gts).sum();
    if total_gts == 0 {
        return Err(Error::Data(
            "froc requires at least one ground-truth lesion in the scan set".into(),
        ));
    }
    let n_scans = scans.len() as f64;

    let mut all: Vec<(f64, bool)> = scans.iter().flat_map(|s| s.outcomes.clone()).collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    // Sweep thresholds from strictest to loosest; record one candidate
    // per distinct score: (fp/scan, sensitivity, threshold).
    let mut candidates = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let score = all[i].0;
        while i < all.len() && all[i].0 == score {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        candidates.push((fp as f64 / n_scans, tp as f64 / total_gts as f64, score));
    }

    Ok(rates
        .iter()
        .map(|&rate| {
            // Candidates are ordered by loosening threshold, so fp/scan is
            // non-decreasing; the last one within budget has the highest
            // sensitivity achievable at this rate.
            let (_, sensitivity, threshold) = candidates
                .iter()
                .rev()
                .find(|(f, _, _)| *f <= rate)
                .copied()
                .expect("rate >= 0 always admits the empty threshold");
            FrocPoint {
                rate,
                sensitivity,
                threshold,
            }
        })
        .collect())
}

/// Mean sensitivity across the FROC operating points.
pub fn froc_average(points: &[FrocPoint]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().map(|p| p.sensitivity).sum::<f64>() / points.len() as f64
}
