//! Evaluation over a dataset split: run the detector on every image,
//! match detections to ground truth, and aggregate the confusion
//! counts, the ROC curve with its area, and the FROC curve.

use std::path::Path;

use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    confusion_metrics, froc, froc_average, match_detections, roc_auc, ConfusionCounts,
    ConfusionMetrics, FrocPoint, RocPoint, ScanOutcomes, FROC_RATES,
};
use crate::model::Detector;
use crate::util::write_atomic;

/// Aggregated results of one evaluation run.
///
/// The curves can be legitimately undefined: the ROC needs at least one
/// hit and one miss among the scored instances, the FROC needs at least
/// one lesion in the split. An undefined curve is reported as an empty
/// point list with a `None` aggregate rather than failing the whole
/// evaluation, so even a hopeless (for example untrained) model gets a
/// complete report.
#[derive(Debug, Serialize)]
pub struct EvalReport {
    /// How matching and counting are defined, spelled out so the
    /// numbers cannot be misread.
    pub conventions: Vec<String>,
    pub images: usize,
    pub lesions: usize,
    /// IOU above which a detection matches a lesion (strict).
    pub match_iou: f64,
    /// Operating score threshold behind the confusion counts.
    pub score_threshold: f64,
    pub counts: ConfusionCounts,
    pub ratios: ConfusionMetrics,
    pub auc: Option<f64>,
    pub froc_average: Option<f64>,
    pub froc: Vec<FrocPoint>,
    pub roc: Vec<RocPoint>,
}

/// Run the detector over a split and score it.
pub fn evaluate(model: &Detector, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.len() == 0 {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let cfg = &model.config;
    let mut counts = ConfusionCounts::default();
    let mut roc_instances: Vec<(f64, bool)> = Vec::new();
    let mut scans: Vec<ScanOutcomes> = Vec::new();
    let mut lesions = 0usize;

    for sample in &dataset.samples {
        let dets = model.detect(&sample.image())?;
        let gts = &sample.boxes;
        lesions += gts.len();

        // Curves use every detection above the reporting floor.
        let matched = match_detections(&dets, gts, cfg.match_iou);
        roc_instances.extend_from_slice(&matched.outcomes);
        if gts.is_empty() {
            let top = dets.iter().map(|d| d.score).fold(0.0_f64, f64::max);
            roc_instances.push((top, false));
        }
        scans.push(ScanOutcomes { outcomes: matched.outcomes, num_gts: gts.len() });

        // Confusion counts use only detections at the operating point.
        let confident: Vec<_> =
            dets.iter().filter(|d| d.score >= cfg.score_threshold).copied().collect();
        let at_threshold = match_detections(&confident, gts, cfg.match_iou);
        counts.tp += at_threshold.true_positives();
        counts.fp += at_threshold.false_positives();
        counts.fn_ += at_threshold.missed_gts();
        if gts.is_empty() && confident.is_empty() {
            counts.tn += 1;
        }
    }

    let (roc, auc) = match roc_auc(&roc_instances) {
        Ok((points, area)) => (points, Some(area)),
        Err(Error::SingleClass { .. }) => (Vec::new(), None),
        Err(e) => return Err(e),
    };
    let froc_points = if lesions > 0 { froc(&scans, &FROC_RATES)? } else { Vec::new() };
    let froc_avg = if lesions > 0 { Some(froc_average(&froc_points)) } else { None };

    Ok(EvalReport {
        conventions: conventions(),
        images: dataset.len(),
        lesions,
        match_iou: cfg.match_iou,
        score_threshold: cfg.score_threshold,
        counts,
        ratios: confusion_metrics(&counts),
        auc,
        froc_average: froc_avg,
        froc: froc_points,
        roc,
    })
}

fn conventions() -> Vec<String> {
    vec![
        "a detection matches a lesion only when IOU is strictly above match_iou, \
         best score first, one detection per lesion"
            .into(),
        "lesion-free images count as image-level negatives: TN when no detection \
         reaches score_threshold, FP detections otherwise"
            .into(),
        "ROC instances are all matched detection outcomes plus one image-level \
         negative per lesion-free image, scored by its best detection (0 when clean)"
            .into(),
        "FROC counts individual false-positive detections per scan at rates \
         0.125..8 and reports lesion sensitivity at each budget"
            .into(),
    ]
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    /// The headline numbers as a one-row CSV. Leading `#` lines spell
    /// out the matching and counting conventions; undefined ratios
    /// (zero denominators) are written literally as `undefined`.
    pub fn to_csv(&self) -> String {
        let ratio = |r: Option<f64>| r.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        let mut out = String::new();
        for line in &self.conventions {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(
            "images,lesions,match_iou,score_threshold,tp,fp,fn,tn,\
             sensitivity,specificity,precision,accuracy,auc,froc_average\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.images,
            self.lesions,
            self.match_iou,
            self.score_threshold,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.counts.tn,
            ratio(self.ratios.sensitivity),
            ratio(self.ratios.specificity),
            ratio(self.ratios.precision),
            ratio(self.ratios.accuracy),
            ratio(self.auc),
            ratio(self.froc_average),
        ));
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    /// `threshold,fpr,tpr` rows, one per ROC point.
    pub fn save_roc_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.roc {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
        }
        write_atomic(path, out.as_bytes())
    }

    /// `fp_per_scan,sensitivity,threshold` rows, one per FROC point.
    pub fn save_froc_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fp_per_scan,sensitivity,threshold\n");
        for p in &self.froc {
            out.push_str(&format!("{},{},{}\n", p.rate, p.sensitivity, p.threshold));
        }
        write_atomic(path, out.as_bytes())
    }

    /// Terse single-line summary for terminals.
    pub fn summary(&self) -> String {
        let r3 = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{:.3}", v));
        let r4 = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{:.4}", v));
        format!(
            "images={} lesions={} auc={} sensitivity={} specificity={} precision={} froc_avg={}",
            self.images,
            self.lesions,
            r4(self.auc),
            r3(self.ratios.sensitivity),
            r3(self.ratios.specificity),
            r3(self.ratios.precision),
            r4(self.froc_average),
        )
    }
}
