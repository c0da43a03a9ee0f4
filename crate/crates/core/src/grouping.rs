//! Association of detections across forward passes into instance sets.
//!
//! Every detection of the first pass seeds a set. Detections of each later
//! pass are visited in canonical order (descending maximum score, then
//! lexicographic box). A detection joins the set whose best member IoU is
//! highest among the sets that have no member from the current pass yet,
//! provided that IoU reaches the match threshold; ties go to the older set.
//! Otherwise the detection seeds a new set. One member per pass keeps the
//! set size at or below the pass count.

use crate::detection_io::{canonical_detection_order, Detection, ImagePasses};
use crate::geometry::{iou, BoundingBox};

/// Default IoU a detection needs against some member of a set to join it.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// A detection together with the (0-based) pass that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub pass: usize,
    pub detection: Detection,
}

/// Detections from different passes judged to be the same object.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    members: Vec<Member>,
    creation_index: usize,
}

impl InstanceSet {
    /// Builds a set directly. Panics if `members` is empty or holds two
    /// members from the same pass.
    pub fn from_members(members: Vec<Member>, creation_index: usize) -> Self {
        assert!(!members.is_empty(), "instance set needs at least one member");
        let mut passes: Vec<usize> = members.iter().map(|m| m.pass).collect();
        passes.sort_unstable();
        assert!(
            passes.windows(2).all(|w| w[0] != w[1]),
            "instance set holds two members from one pass"
        );
        InstanceSet {
            members,
            creation_index,
        }
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    /// Number of members, `r`.
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn creation_index(&self) -> usize {
        self.creation_index
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.members.iter().map(|m| m.detection.bbox).collect()
    }

    fn has_pass(&self, pass: usize) -> bool {
        self.members.iter().any(|m| m.pass == pass)
    }

    fn best_iou(&self, b: &BoundingBox) -> f64 {
        self.members
            .iter()
            .map(|m| iou(&m.detection.bbox, b))
            .fold(0.0, f64::max)
    }
}

/// Groups the passes of one image into instance sets, returned in creation order.
pub fn group_passes(img: &ImagePasses, match_iou: f64) -> Vec<InstanceSet> {
    let mut sets: Vec<InstanceSet> = Vec::new();
    for (pass, dets) in img.passes.iter().enumerate() {
        for idx in canonical_detection_order(dets) {
            let det = &dets[idx];
            let mut best: Option<(usize, f64)> = None;
            for (s, set) in sets.iter().enumerate() {
                if set.has_pass(pass) {
                    continue;
                }
                let v = set.best_iou(&det.bbox);
                // strict comparison keeps the lowest creation index on ties
                if v >= match_iou && best.is_none_or(|(_, b)| v > b) {
                    best = Some((s, v));
                }
            }
            let member = Member {
                pass,
                detection: det.clone(),
            };
            match best {
                Some((s, _)) => sets[s].members.push(member),
                None => {
                    let creation_index = sets.len();
                    sets.push(InstanceSet {
                        members: vec![member],
                        creation_index,
                    });
                }
            }
        }
    }
    sets
}
