//! Detection-to-ground-truth matching and the recall-weighted F2 protocol.
//!
//! Matching is greedy in descending confidence: each detection takes the
//! unmatched ground truth with the highest IoU, provided the IoU clears the
//! threshold (0.3 by default — approximate localization is enough for this
//! task). Dataset scores are micro-averaged: TP/FP/FN are summed over all
//! images before precision and recall are formed.

use std::collections::BTreeMap;

use crate::geometry::{iou, BBox, Detection};

#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `(detection index, ground-truth index, iou)` for each match.
    pub matches: Vec<(usize, usize, f64)>,
}

/// Dataset-level evaluation at one confidence operating point.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
    pub per_image: Vec<(String, MatchResult)>,
}

/// Greedy one-to-one matching in descending confidence order.
/// Ties in confidence are broken by input order.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("confidence must not be NaN")
    });

    let mut gt_taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let ov = iou(&dets[di].bbox, gt);
            if best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, ov)) if ov >= iou_thresh => {
                gt_taken[gi] = true;
                result.true_positives += 1;
                result.matches.push((di, gi, ov));
            }
            _ => result.false_positives += 1,
        }
    }
    result.false_negatives = gt_taken.iter().filter(|&&t| !t).count();
    result
}

/// F-beta from precision and recall; 0 when the denominator vanishes.
pub fn fbeta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// F2: recall weighted four times precision.
pub fn f2(precision: f64, recall: f64) -> f64 {
    fbeta(precision, recall, 2.0)
}

/// Micro-averaged evaluation over aligned prediction/annotation maps.
/// Annotated images without predictions count as all-missed.
pub fn evaluate_dataset(
    predictions: &BTreeMap<String, Vec<Detection>>,
    annotations: &BTreeMap<String, Vec<BBox>>,
    iou_thresh: f64,
    conf_thresh: f64,
) -> EvalReport {
    static EMPTY: Vec<Detection> = Vec::new();
    let mut per_image = Vec::with_capacity(annotations.len());
    let (mut tp, mut fp, mut fnc) = (0usize, 0usize, 0usize);
    for (stem, gts) in annotations {
        let dets: Vec<Detection> = predictions
            .get(stem)
            .unwrap_or(&EMPTY)
            .iter()
            .filter(|d| d.confidence >= conf_thresh)
            .copied()
            .collect();
        let m = match_detections(&dets, gts, iou_thresh);
        tp += m.true_positives;
        fp += m.false_positives;
        fnc += m.false_negatives;
        per_image.push((stem.clone(), m));
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fnc > 0 {
        tp as f64 / (tp + fnc) as f64
    } else {
        0.0
    };
    EvalReport {
        precision,
        recall,
        f2: f2(precision, recall),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fnc,
        iou_threshold: iou_thresh,
        conf_threshold: conf_thresh,
        per_image,
    }
}

impl EvalReport {
    /// Key-value rendering for logs and report files.
    pub fn to_key_value_text(&self) -> String {
        format!(
            "precision = {:.6}\nrecall = {:.6}\nf2 = {:.6}\ntrue_positives = {}\nfalse_positives = {}\nfalse_negatives = {}\niou_threshold = {}\nconf_threshold = {}\n",
            self.precision,
            self.recall,
            self.f2,
            self.true_positives,
            self.false_positives,
            self.false_negatives,
            self.iou_threshold,
            self.conf_threshold,
        )
    }

    /// One row per image: `image<TAB>tp<TAB>fp<TAB>fn`.
    pub fn per_image_table(&self) -> String {
        let mut out = String::from("image\ttp\tfp\tfn\n");
        for (stem, m) in &self.per_image {
            out.push_str(&format!(
                "{stem}\t{}\t{}\t{}\n",
                m.true_positives, m.false_positives, m.false_negatives
            ));
        }
        out
    }
}

/// Area under the precision-recall curve swept by descending confidence,
/// integrated with all-points interpolation (the precision envelope).
/// Returns 0 with a warning when there are no ground truths.
pub fn average_precision(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> f64 {
    if gts.is_empty() {
        log::warn!("average_precision: no ground truths, returning 0");
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .expect("confidence must not be NaN")
    });
    // greedy flags, one pass in confidence order
    let mut gt_taken = vec![false; gts.len()];
    let mut is_tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] {
                continue;
            }
            let ov = iou(&dets[di].bbox, gt);
            if best.map_or(true, |(_, b)| ov > b) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, ov)) if ov >= iou_thresh => {
                gt_taken[gi] = true;
                is_tp.push(true);
            }
            _ => is_tp.push(false),
        }
    }
    // cumulative PR points, then integrate under the precision envelope
    let n_gt = gts.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in &is_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((tp as f64 / n_gt, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let envelope = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}
