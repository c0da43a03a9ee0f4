//! Semantic, spatial and occurrence certainty of instance sets, their
//! product, and the per-image minimum used to rank the unlabeled pool.
//!
//! * semantic: one minus the entropy of each member's category vector
//!   normalized by `ln(k)`, averaged over the members;
//! * spatial: mean IoU between each member box and the set's mean box;
//! * occurrence: set size over the number of forward passes.
//!
//! An image without any instance set gets a minimum certainty of `1.0`, so
//! detection-free images are never prioritized.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection_io::ImagePasses;
use crate::error::{Error, Result};
use crate::geometry::{iou, mean_box};
use crate::grouping::{group_passes, InstanceSet, DEFAULT_MATCH_IOU};

/// Shannon entropy in nats, with `0 * ln 0 = 0`.
pub fn entropy(probabilities: &[f64]) -> f64 {
    -probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `1 - H(p) / ln(k)` for a single probability vector over `k` categories.
pub fn detection_certainty(probabilities: &[f64], categories: usize) -> Result<f64> {
    if categories < 2 {
        return Err(Error::contract(format!(
            "semantic certainty needs at least two categories, got {categories}"
        )));
    }
    if probabilities.len() != categories {
        return Err(Error::contract(format!(
            "score vector has {} entries, expected {categories}",
            probabilities.len()
        )));
    }
    let h_max = (categories as f64).ln();
    Ok((1.0 - entropy(probabilities) / h_max).clamp(0.0, 1.0))
}

pub fn semantic_certainty(set: &InstanceSet, categories: usize) -> Result<f64> {
    let mut total = 0.0;
    for m in set.members() {
        total += detection_certainty(&m.detection.scores, categories)?;
    }
    Ok(total / set.len() as f64)
}

pub fn spatial_certainty(set: &InstanceSet) -> f64 {
    let boxes = set.boxes();
    let mean = mean_box(&boxes).expect("instance sets are nonempty");
    boxes.iter().map(|b| iou(&mean, b)).sum::<f64>() / boxes.len() as f64
}

pub fn occurrence_certainty(set: &InstanceSet, passes: usize) -> Result<f64> {
    let r = set.len();
    if r == 0 || r > passes {
        return Err(Error::contract(format!(
            "instance set of size {r} is inconsistent with {passes} passes"
        )));
    }
    Ok(r as f64 / passes as f64)
}

/// The three certainty components of one instance set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertaintyTriple {
    pub semantic: f64,
    pub spatial: f64,
    pub occurrence: f64,
}

impl CertaintyTriple {
    pub fn new(semantic: f64, spatial: f64, occurrence: f64) -> Self {
        CertaintyTriple {
            semantic,
            spatial,
            occurrence,
        }
    }

    pub fn of_set(set: &InstanceSet, categories: usize, passes: usize) -> Result<Self> {
        Ok(CertaintyTriple {
            semantic: semantic_certainty(set, categories)?,
            spatial: spatial_certainty(set),
            occurrence: occurrence_certainty(set, passes)?,
        })
    }

    /// Product of the three components.
    pub fn combined(&self) -> f64 {
        combined_certainty(self)
    }
}

pub fn combined_certainty(t: &CertaintyTriple) -> f64 {
    t.semantic * t.spatial * t.occurrence
}

/// Parameters shared by every image of a ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertaintyParams {
    pub categories: usize,
    pub passes: usize,
    pub match_iou: f64,
}

impl CertaintyParams {
    pub fn new(categories: usize, passes: usize) -> Self {
        CertaintyParams {
            categories,
            passes,
            match_iou: DEFAULT_MATCH_IOU,
        }
    }
}

/// Certainty summary of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCertainty {
    pub image_id: String,
    pub sets: Vec<CertaintyTriple>,
    pub c_min: f64,
}

impl ImageCertainty {
    pub fn from_triples(image_id: impl Into<String>, sets: Vec<CertaintyTriple>) -> Self {
        let c_min = sets
            .iter()
            .map(CertaintyTriple::combined)
            .fold(1.0, f64::min);
        ImageCertainty {
            image_id: image_id.into(),
            sets,
            c_min,
        }
    }

    pub fn set_count(&self) -> usize {
        self.sets.len()
    }

    /// Component-wise minima over the sets, `(1, 1, 1)` for an empty image.
    pub fn component_minima(&self) -> CertaintyTriple {
        self.sets.iter().fold(
            CertaintyTriple::new(1.0, 1.0, 1.0),
            |acc, t| CertaintyTriple {
                semantic: acc.semantic.min(t.semantic),
                spatial: acc.spatial.min(t.spatial),
                occurrence: acc.occurrence.min(t.occurrence),
            },
        )
    }
}

/// Groups the (already thresholded) passes of `img` and summarizes them.
pub fn image_certainty(img: &ImagePasses, params: &CertaintyParams) -> Result<ImageCertainty> {
    if img.pass_count() != params.passes {
        return Err(Error::validation(
            &img.image_id,
            "passes",
            format!("expected {} passes, got {}", params.passes, img.pass_count()),
        ));
    }
    let triples = group_passes(img, params.match_iou)
        .iter()
        .map(|s| CertaintyTriple::of_set(s, params.categories, params.passes))
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageCertainty::from_triples(img.image_id.clone(), triples))
}

/// Certainty of every pool image, ascending by `c_min` with ties broken by
/// image id. Images are scored in parallel and sorted afterwards.
pub fn rank_pool(pool: &[ImagePasses], params: &CertaintyParams) -> Result<Vec<ImageCertainty>> {
    let mut ranked = pool
        .par_iter()
        .map(|img| image_certainty(img, params))
        .collect::<Result<Vec<_>>>()?;
    sort_ranking(&mut ranked);
    Ok(ranked)
}

pub(crate) fn sort_ranking(ranked: &mut [ImageCertainty]) {
    ranked.sort_by(ranking_cmp);
}

fn ranking_cmp(a: &ImageCertainty, b: &ImageCertainty) -> Ordering {
    a.c_min
        .total_cmp(&b.c_min)
        .then_with(|| a.image_id.cmp(&b.image_id))
}
