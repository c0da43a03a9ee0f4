//! Axis-aligned bounding boxes, intersection-over-union, mean boxes and
//! greedy non-maximum suppression.
//!
//! Boxes use the corner convention `[x_min, y_min, x_max, y_max]` in
//! continuous image coordinates. A box with zero or negative area cannot be
//! constructed, so every function here can assume a strictly positive area.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned rectangle with strictly positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let reason = if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            Some("coordinates must be finite")
        } else if x_max <= x_min || y_max <= y_min {
            Some("box must have strictly positive area")
        } else {
            None
        };
        match reason {
            Some(reason) => Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
                reason,
            }),
            None => Ok(BoundingBox {
                x_min,
                y_min,
                x_max,
                y_max,
            }),
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Length of the box diagonal.
    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn fits_within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Canonical total order: lexicographic on `(x_min, y_min, x_max, y_max)`.
    ///
    /// Every tie-break in the crate goes through this ordering.
    pub fn canonical_cmp(&self, other: &BoundingBox) -> Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection-over-union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Coordinate-wise arithmetic mean of a nonempty set of boxes.
pub fn mean_box(boxes: &[BoundingBox]) -> Result<BoundingBox> {
    if boxes.is_empty() {
        return Err(Error::contract("mean_box requires at least one box"));
    }
    let k = boxes.len() as f64;
    let mut acc = [0.0f64; 4];
    for b in boxes {
        for (a, v) in acc.iter_mut().zip(b.to_array()) {
            *a += v;
        }
    }
    BoundingBox::new(acc[0] / k, acc[1] / k, acc[2] / k, acc[3] / k)
}

/// Greedy non-maximum suppression.
///
/// Returns the indices of the kept detections in descending score order.
/// Ties in score are broken by [`BoundingBox::canonical_cmp`], then by input
/// position. A detection is kept iff its IoU with every already kept
/// detection is strictly below `iou_threshold`.
pub fn nms(detections: &[(BoundingBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(detections.iter().map(|(b, s)| (b, *s)));
    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for idx in order {
        let candidate = &detections[idx].0;
        if kept
            .iter()
            .all(|&k| iou(&detections[k].0, candidate) < iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept
}

/// Indices sorted by descending score, then canonical box order, then position.
pub(crate) fn score_order<'a>(items: impl Iterator<Item = (&'a BoundingBox, f64)>) -> Vec<usize> {
    let items: Vec<_> = items.collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| {
        let (bi, si) = items[i];
        let (bj, sj) = items[j];
        sj.total_cmp(&si)
            .then_with(|| bi.canonical_cmp(bj))
            .then(i.cmp(&j))
    });
    order
}
