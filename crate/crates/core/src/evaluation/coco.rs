//! COCO-style mean average precision.
//!
//! Conventions: IoU thresholds 0.50:0.05:0.95, 101-point interpolated
//! precision, at most 100 detections per image (highest scores first), and
//! only categories with at least one ground-truth object contribute to the
//! mean. Area ranges and crowd annotations are not modelled.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{canonical_prediction_order, f1_image, F1Score, FinalPrediction, Predictions};
use crate::detection_io::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::iou;

/// `[0.50, 0.55, ..., 0.95]`, each the double nearest to `k / 100`.
pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

pub const MAX_DETECTIONS_PER_IMAGE: usize = 100;

const RECALL_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AP averaged over the IoU thresholds; `None` for categories without
    /// ground truth.
    pub per_category_ap: Vec<Option<f64>>,
    pub map: f64,
    pub per_image_f1: BTreeMap<String, F1Score>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EvalResult {
    pub fn mean_f1(&self) -> f64 {
        if self.per_image_f1.is_empty() {
            return 0.0;
        }
        self.per_image_f1.values().map(|s| s.f1).sum::<f64>() / self.per_image_f1.len() as f64
    }
}

/// Evaluates the images present in `gt`. Predictions for other images are
/// ignored; images without a predictions entry count as having none.
pub fn coco_map(
    preds: &Predictions,
    gt: &GroundTruth,
    categories: usize,
    f1_iou: f64,
) -> Result<EvalResult> {
    if gt.values().all(|g| g.objects.is_empty()) {
        return Err(Error::contract("mAP is undefined without ground-truth objects"));
    }
    let empty = Vec::new();
    let capped: Vec<Vec<FinalPrediction>> = gt
        .keys()
        .map(|id| {
            let p = preds.get(id).unwrap_or(&empty);
            canonical_prediction_order(p)
                .into_iter()
                .take(MAX_DETECTIONS_PER_IMAGE)
                .map(|i| p[i])
                .collect()
        })
        .collect();

    let mut per_category_ap = Vec::with_capacity(categories);
    for c in 0..categories {
        let n_gt: usize = gt
            .values()
            .map(|g| g.objects.iter().filter(|o| o.category == c).count())
            .sum();
        if n_gt == 0 {
            per_category_ap.push(None);
            continue;
        }
        let total: f64 = COCO_IOU_THRESHOLDS
            .iter()
            .map(|&thr| category_ap(&capped, gt, c, thr, n_gt))
            .sum();
        per_category_ap.push(Some(total / COCO_IOU_THRESHOLDS.len() as f64));
    }
    let present: Vec<f64> = per_category_ap.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;

    let mut per_image_f1 = BTreeMap::new();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (id, g) in gt {
        let s = f1_image(preds.get(id).unwrap_or(&empty), g, f1_iou);
        tp += s.tp;
        fp += s.fp;
        fn_ += s.fn_;
        per_image_f1.insert(id.clone(), s);
    }
    Ok(EvalResult {
        per_category_ap,
        map,
        per_image_f1,
        tp,
        fp,
        fn_,
    })
}

/// AP of one category at one IoU threshold.
fn category_ap(
    capped: &[Vec<FinalPrediction>],
    gt: &GroundTruth,
    category: usize,
    threshold: f64,
    n_gt: usize,
) -> f64 {
    // (score, is_tp); images and within-image ranks are already in order,
    // so a stable sort on score keeps COCO's tie order.
    let mut entries: Vec<(f64, bool)> = Vec::new();
    for (dets, g) in capped.iter().zip(gt.values()) {
        let gts: Vec<_> = g.objects.iter().filter(|o| o.category == category).collect();
        let mut taken = vec![false; gts.len()];
        for d in dets.iter().filter(|d| d.category == category) {
            let mut best: Option<(usize, f64)> = None;
            for (k, o) in gts.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let v = iou(&d.bbox, &o.bbox);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((k, v));
                }
            }
            if let Some((k, _)) = best {
                taken[k] = true;
            }
            entries.push((d.score, best.is_some()));
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));
    interpolated_ap(&entries, n_gt)
}

fn interpolated_ap(entries: &[(f64, bool)], n_gt: usize) -> f64 {
    if entries.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(entries.len());
    let mut precision = Vec::with_capacity(entries.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in entries {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}
