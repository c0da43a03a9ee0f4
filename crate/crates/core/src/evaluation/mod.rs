//! Detection metrics: per-image F1, COCO-style mAP and the two-sided
//! Student's t-test used to compare sampled and remaining images.

mod coco;
mod ttest;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection_io::{argmax, GroundTruthImage};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::{iou, mean_box, score_order, BoundingBox};
use crate::grouping::InstanceSet;

pub use coco::{coco_map, EvalResult, COCO_IOU_THRESHOLDS, MAX_DETECTIONS_PER_IMAGE};
pub use ttest::{
    regularized_incomplete_beta, student_t_two_sided_p, ttest_two_sided, TTestResult,
};

/// Default IoU for counting a prediction as a true positive in F1.
pub const DEFAULT_F1_IOU: f64 = 0.5;

/// A single consolidated prediction as consumed by the evaluators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalPrediction {
    pub bbox: BoundingBox,
    pub category: usize,
    pub score: f64,
}

/// Sorts predictions by descending score, then canonical box order.
pub(crate) fn canonical_prediction_order(preds: &[FinalPrediction]) -> Vec<usize> {
    score_order(preds.iter().map(|p| (&p.bbox, p.score)))
}

/// Turns instance sets into one prediction each: the mean box, and the
/// argmax of the member-averaged probability vector with its value as score.
pub fn consolidate(sets: &[InstanceSet]) -> Vec<FinalPrediction> {
    let preds: Vec<FinalPrediction> = sets
        .iter()
        .map(|set| {
            let members = set.members();
            let k = members[0].detection.scores.len();
            let mut mean = vec![0.0; k];
            for m in members {
                for (acc, s) in mean.iter_mut().zip(&m.detection.scores) {
                    *acc += s;
                }
            }
            let r = members.len() as f64;
            mean.iter_mut().for_each(|v| *v /= r);
            let category = argmax(&mean);
            FinalPrediction {
                bbox: mean_box(&set.boxes()).expect("instance sets are nonempty"),
                category,
                score: mean[category].clamp(0.0, 1.0),
            }
        })
        .collect();
    canonical_prediction_order(&preds)
        .into_iter()
        .map(|i| preds[i])
        .collect()
}

/// Match counts and F1 for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
}

impl F1Score {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let f1 = if tp + fp + fn_ == 0 {
            1.0
        } else if tp == 0 {
            0.0
        } else {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / (tp + fn_) as f64;
            2.0 * p * r / (p + r)
        };
        F1Score { tp, fp, fn_, f1 }
    }
}

/// Greedy score-descending matching of predictions to ground truth.
///
/// A prediction is a true positive when an unmatched object of the same
/// category overlaps it with IoU at or above `iou_threshold`; the
/// highest-IoU such object is consumed. Empty predictions against empty
/// ground truth score 1.
pub fn f1_image(preds: &[FinalPrediction], gt: &GroundTruthImage, iou_threshold: f64) -> F1Score {
    let mut matched = vec![false; gt.objects.len()];
    let mut tp = 0;
    for i in canonical_prediction_order(preds) {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, obj) in gt.objects.iter().enumerate() {
            if matched[g] || obj.category != p.category {
                continue;
            }
            let v = iou(&p.bbox, &obj.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
    }
    F1Score::from_counts(tp, preds.len() - tp, gt.objects.len() - tp)
}

/// Predictions of one image, one record per line in prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    pub predictions: Vec<FinalPrediction>,
}

pub type Predictions = BTreeMap<String, Vec<FinalPrediction>>;

/// Loads a predictions file, validating scores and category indices.
pub fn load_predictions(path: &Path, categories: usize) -> Result<Predictions> {
    let records: Vec<PredictionRecord> = fsutil::read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for r in records {
        for p in &r.predictions {
            if p.category >= categories {
                return Err(Error::validation(
                    &r.image_id,
                    "category",
                    format!("index {} but only {categories} categories", p.category),
                ));
            }
            if !(0.0..=1.0).contains(&p.score) {
                return Err(Error::validation(
                    &r.image_id,
                    "score",
                    format!("{} outside [0, 1]", p.score),
                ));
            }
        }
        if out.insert(r.image_id.clone(), r.predictions).is_some() {
            return Err(Error::validation(&r.image_id, "image_id", "duplicate record"));
        }
    }
    Ok(out)
}

pub fn save_predictions(path: &Path, preds: &Predictions) -> Result<()> {
    let records: Vec<PredictionRecord> = preds
        .iter()
        .map(|(id, p)| PredictionRecord {
            image_id: id.clone(),
            predictions: p.clone(),
        })
        .collect();
    fsutil::write_jsonl(path, &records)
}
