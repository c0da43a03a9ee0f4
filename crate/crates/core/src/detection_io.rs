//! Data model and line-delimited file formats for multi-pass detections,
//! ground-truth annotations and dataset manifests.
//!
//! Detections file, one image per line:
//!
//! ```text
//! {"image_id": "a", "width": 640, "height": 480,
//!  "passes": [[{"bbox": [x1, y1, x2, y2], "scores": [p_1, ..., p_k]}], ...]}
//! ```
//!
//! Ground truth, one image per line:
//!
//! ```text
//! {"image_id": "a", "objects": [{"bbox": [x1, y1, x2, y2], "category": 3}]}
//! ```
//!
//! The manifest is a single JSON document with `categories`,
//! `initial_training`, `pool`, `validation` and `test` arrays.
//!
//! Floats are written in shortest round-trip form, so a load after a save
//! returns bit-identical values.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::geometry::{nms, score_order, BoundingBox};

/// Tolerance on the sum of a score vector.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-6;

/// Ordered, unique category names. At least two categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryCatalog(Vec<String>);

impl CategoryCatalog {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Manifest(format!(
                "at least two categories are required, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(Error::Manifest("empty category name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::Manifest(format!("duplicate category `{n}`")));
            }
        }
        Ok(CategoryCatalog(names))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.0.get(index).map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for CategoryCatalog {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        CategoryCatalog::new(v)
    }
}

impl From<CategoryCatalog> for Vec<String> {
    fn from(c: CategoryCatalog) -> Self {
        c.0
    }
}

/// One predicted box with its category probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub scores: Vec<f64>,
}

impl Detection {
    pub fn new(bbox: BoundingBox, scores: Vec<f64>) -> Self {
        Detection { bbox, scores }
    }

    /// Largest category probability.
    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the largest category probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }

    /// Checks the score vector: length `categories`, entries in `[0, 1]`,
    /// sum equal to one within [`SCORE_SUM_TOLERANCE`].
    pub fn validate_scores(&self, categories: usize) -> std::result::Result<(), String> {
        if self.scores.len() != categories {
            return Err(format!(
                "expected {categories} scores, got {}",
                self.scores.len()
            ));
        }
        if let Some(s) = self
            .scores
            .iter()
            .find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s)))
        {
            return Err(format!("score {s} outside [0, 1]"));
        }
        let sum: f64 = self.scores.iter().sum();
        if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
            return Err(format!("scores sum to {sum}, expected 1"));
        }
        Ok(())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The `n` stochastic forward passes over one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePasses {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub passes: Vec<Vec<Detection>>,
}

impl ImagePasses {
    pub fn pass_count(&self) -> usize {
        self.passes.len()
    }

    pub fn detection_count(&self) -> usize {
        self.passes.iter().map(Vec::len).sum()
    }

    /// Validates the record against an optional pass count and category count.
    pub fn validate(&self, schema: &PassesSchema) -> Result<()> {
        let id = &self.image_id;
        if id.is_empty() {
            return Err(Error::validation(id, "image_id", "empty"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation(id, "size", "width and height must be positive"));
        }
        if let Some(n) = schema.passes {
            if self.passes.len() != n {
                return Err(Error::validation(
                    id,
                    "passes",
                    format!("expected {n} passes, got {}", self.passes.len()),
                ));
            }
        }
        for (p, pass) in self.passes.iter().enumerate() {
            for d in pass {
                if !d.bbox.fits_within(self.width as f64, self.height as f64) {
                    return Err(Error::validation(
                        id,
                        "bbox",
                        format!("pass {p}: {:?} outside the image", d.bbox.to_array()),
                    ));
                }
                if let Some(k) = schema.categories {
                    d.validate_scores(k)
                        .map_err(|m| Error::validation(id, "scores", format!("pass {p}: {m}")))?;
                }
            }
        }
        Ok(())
    }
}

/// Shape constraints enforced when loading detections.
///
/// `categories: None` infers the category count from the first detection in
/// the file and enforces it on the rest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassesSchema {
    pub passes: Option<usize>,
    pub categories: Option<usize>,
}

impl PassesSchema {
    pub fn new(passes: usize, categories: usize) -> Self {
        PassesSchema {
            passes: Some(passes),
            categories: Some(categories),
        }
    }
}

/// Loads and validates a detections file. Duplicate image ids are rejected.
pub fn load_image_passes(path: &Path, schema: &PassesSchema) -> Result<Vec<ImagePasses>> {
    let records: Vec<ImagePasses> = fsutil::read_jsonl(path)?;
    let mut schema = *schema;
    if schema.categories.is_none() {
        schema.categories = records
            .iter()
            .flat_map(|r| r.passes.iter().flatten())
            .map(|d| d.scores.len())
            .next();
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::validation(&r.image_id, "image_id", "duplicate record"));
        }
        r.validate(&schema)?;
    }
    Ok(records)
}

pub fn save_image_passes(path: &Path, images: &[ImagePasses]) -> Result<()> {
    fsutil::write_jsonl(path, images)
}

/// Confidence and NMS thresholds applied to every pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Minimum maximum-category score a detection needs to survive.
    pub confidence: f64,
    /// IoU at or above which the lower-scored detection is suppressed.
    pub nms_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            confidence: 0.5,
            nms_iou: 0.3,
        }
    }
}

/// Per pass: drops detections whose maximum score is below the confidence
/// threshold, then runs NMS keyed on the maximum score. Surviving detections
/// are returned in descending score order.
pub fn apply_thresholds(img: &ImagePasses, thresholds: &Thresholds) -> ImagePasses {
    let passes = img
        .passes
        .iter()
        .map(|pass| {
            let survivors: Vec<&Detection> = pass
                .iter()
                .filter(|d| d.max_score() >= thresholds.confidence)
                .collect();
            let scored: Vec<(BoundingBox, f64)> =
                survivors.iter().map(|d| (d.bbox, d.max_score())).collect();
            nms(&scored, thresholds.nms_iou)
                .into_iter()
                .map(|i| survivors[i].clone())
                .collect()
        })
        .collect();
    ImagePasses {
        image_id: img.image_id.clone(),
        width: img.width,
        height: img.height,
        passes,
    }
}

/// Orders detections by descending maximum score, then canonical box order.
pub(crate) fn canonical_detection_order(dets: &[Detection]) -> Vec<usize> {
    score_order(dets.iter().map(|d| (&d.bbox, d.max_score())))
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthObject {
    pub bbox: BoundingBox,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthImage {
    pub image_id: String,
    pub objects: Vec<GroundTruthObject>,
}

pub type GroundTruth = BTreeMap<String, GroundTruthImage>;

/// Loads ground truth, rejecting duplicate ids and category indices `>= categories`.
pub fn load_ground_truth(path: &Path, categories: usize) -> Result<GroundTruth> {
    let records: Vec<GroundTruthImage> = fsutil::read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(o) = r.objects.iter().find(|o| o.category >= categories) {
            return Err(Error::validation(
                &r.image_id,
                "category",
                format!("index {} but only {categories} categories", o.category),
            ));
        }
        if out.contains_key(&r.image_id) {
            return Err(Error::validation(&r.image_id, "image_id", "duplicate record"));
        }
        out.insert(r.image_id.clone(), r);
    }
    Ok(out)
}

pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> Result<()> {
    let records: Vec<&GroundTruthImage> = gt.values().collect();
    fsutil::write_jsonl(path, &records)
}

/// Category catalog plus the four disjoint image partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub categories: CategoryCatalog,
    pub initial_training: Vec<String>,
    pub pool: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    /// Partitions must be duplicate-free, pairwise disjoint, and the initial
    /// training set nonempty unless the manifest lists no images at all.
    pub fn validate(&self) -> Result<()> {
        if self.initial_training.is_empty() && self.all_ids().next().is_some() {
            return Err(Error::Manifest("initial training set is empty".into()));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, ids) in self.partitions() {
            for id in ids {
                if let Some(prev) = owner.insert(id.as_str(), name) {
                    return Err(Error::Manifest(if prev == name {
                        format!("image `{id}` listed twice in {name}")
                    } else {
                        format!("image `{id}` appears in both {prev} and {name}")
                    }));
                }
            }
        }
        Ok(())
    }

    pub fn partitions(&self) -> [(&'static str, &[String]); 4] {
        [
            ("initial_training", &self.initial_training),
            ("pool", &self.pool),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }

    /// Every image id in the manifest.
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.initial_training
            .iter()
            .chain(&self.pool)
            .chain(&self.validation)
            .chain(&self.test)
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fsutil::read_to_string(path)?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    m.validate()?;
    Ok(m)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use proptest::prelude::*;
    use std::io::Write;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    fn image(passes: Vec<Vec<Detection>>) -> ImagePasses {
        ImagePasses {
            image_id: "img".into(),
            width: 100,
            height: 100,
            passes,
        }
    }

    #[test]
    fn empty_file_loads_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.jsonl", "");
        assert!(load_image_passes(&p, &PassesSchema::new(15, 3)).unwrap().is_empty());
    }

    #[test]
    fn loads_two_pass_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            r#"{"image_id":"a","width":50,"height":40,"passes":[[{"bbox":[1,2,10,20],"scores":[0.75,0.25]}],[{"bbox":[1.5,2,10,20],"scores":[0.5,0.5]}]]}
"#,
        );
        let imgs = load_image_passes(&p, &PassesSchema::new(2, 2)).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].pass_count(), 2);
        assert_eq!(imgs[0].passes[1][0].bbox, bb(1.5, 2.0, 10.0, 20.0));
    }

    #[test]
    fn bad_score_sum_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            r#"{"image_id":"fish_17","width":50,"height":40,"passes":[[{"bbox":[1,2,10,20],"scores":[0.5,0.3]}]]}"#,
        );
        let err = load_image_passes(&p, &PassesSchema::new(1, 2)).unwrap_err();
        assert!(matches!(&err, Error::Validation { image_id, field: "scores", .. } if image_id == "fish_17"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            "{\"image_id\":\"a\",\"width\":5,\"height\":5,\"passes\":[]}\n{not json\n",
        );
        let err = load_image_passes(&p, &PassesSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn rejects_duplicates_wrong_pass_count_and_out_of_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"image_id":"a","width":5,"height":5,"passes":[[]]}"#;
        let p = write(&dir, "dup.jsonl", &format!("{rec}\n{rec}\n"));
        assert!(load_image_passes(&p, &PassesSchema::default()).is_err());

        let p = write(&dir, "n.jsonl", rec);
        assert!(load_image_passes(&p, &PassesSchema::new(15, 2)).is_err());

        let p = write(
            &dir,
            "oob.jsonl",
            r#"{"image_id":"a","width":5,"height":5,"passes":[[{"bbox":[0,0,6,5],"scores":[1,0]}]]}"#,
        );
        let err = load_image_passes(&p, &PassesSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Validation { field: "bbox", .. }));
    }

    #[test]
    fn inferred_category_count_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "d.jsonl",
            r#"{"image_id":"a","width":50,"height":50,"passes":[[{"bbox":[0,0,6,5],"scores":[1,0]},{"bbox":[0,0,6,5],"scores":[1,0,0]}]]}"#,
        );
        assert!(load_image_passes(&p, &PassesSchema::default()).is_err());
    }

    #[test]
    fn thresholds_leave_clean_input_unchanged() {
        let img = image(vec![vec![
            Detection::new(bb(0.0, 0.0, 10.0, 10.0), vec![0.9, 0.1]),
            Detection::new(bb(50.0, 50.0, 60.0, 60.0), vec![0.3, 0.7]),
        ]]);
        assert_eq!(apply_thresholds(&img, &Thresholds::default()), img);
    }

    #[test]
    fn thresholds_drop_low_confidence() {
        let img = image(vec![vec![Detection::new(
            bb(0.0, 0.0, 10.0, 10.0),
            vec![0.4, 0.3, 0.3],
        )]]);
        let out = apply_thresholds(&img, &Thresholds::default());
        assert_eq!(out.pass_count(), 1);
        assert!(out.passes[0].is_empty());
    }

    #[test]
    fn thresholds_suppress_overlap() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(0.0, 0.0, 10.0, 6.0);
        // hand check: intersection 60, union 100
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
        let img = image(vec![vec![
            Detection::new(b, vec![0.2, 0.8]),
            Detection::new(a, vec![0.9, 0.1]),
        ]]);
        let out = apply_thresholds(&img, &Thresholds::default());
        assert_eq!(out.passes[0], vec![Detection::new(a, vec![0.9, 0.1])]);
    }

    #[test]
    fn manifest_rules() {
        let cats = CategoryCatalog::new(vec!["a".into(), "b".into()]).unwrap();
        let ids = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let m = DatasetManifest {
            categories: cats.clone(),
            initial_training: ids("i", 100),
            pool: ids("p", 1796),
            validation: ids("v", 660),
            test: ids("t", 449),
        };
        assert!(m.validate().is_ok());
        assert_eq!(m.all_ids().count(), 3005);

        let mut bad = m.clone();
        bad.test.push("p3".into());
        assert!(matches!(bad.validate(), Err(Error::Manifest(_))));

        let mut empty = m.clone();
        empty.initial_training.clear();
        assert!(empty.validate().is_err());

        assert!(CategoryCatalog::new(vec!["a".into()]).is_err());
        assert!(CategoryCatalog::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn manifest_load_rejects_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "m.json",
            r#"{"categories":["x","y"],"initial_training":["a"],"pool":["b","c"],"validation":[],"test":["c"]}"#,
        );
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn ground_truth_category_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "gt.jsonl",
            r#"{"image_id":"a","objects":[{"bbox":[0,0,1,1],"category":2}]}"#,
        );
        assert!(load_ground_truth(&p, 2).is_err());
        assert!(load_ground_truth(&p, 3).is_ok());
    }

    fn arb_detection(k: usize) -> impl Strategy<Value = Detection> {
        (
            0.0..80.0f64,
            0.0..80.0f64,
            1.0..20.0f64,
            1.0..20.0f64,
            proptest::collection::vec(0.01..1.0f64, k),
        )
            .prop_map(|(x, y, w, h, raw)| {
                let s: f64 = raw.iter().sum();
                Detection::new(bb(x, y, x + w, y + h), raw.iter().map(|r| r / s).collect())
            })
    }

    fn arb_image() -> impl Strategy<Value = ImagePasses> {
        proptest::collection::vec(proptest::collection::vec(arb_detection(3), 0..6), 1..4)
            .prop_map(image)
    }

    proptest! {
        #[test]
        fn thresholds_are_idempotent(img in arb_image(), conf in 0.0..0.8f64, thr in 0.0..=1.0f64) {
            let t = Thresholds { confidence: conf, nms_iou: thr };
            let once = apply_thresholds(&img, &t);
            prop_assert_eq!(once.pass_count(), img.pass_count());
            for d in once.passes.iter().flatten() {
                prop_assert!(d.max_score() >= conf);
            }
            prop_assert_eq!(apply_thresholds(&once, &t), once);
        }

        #[test]
        fn files_round_trip(imgs in proptest::collection::vec(arb_image(), 0..4)) {
            let imgs: Vec<ImagePasses> = imgs
                .into_iter()
                .enumerate()
                .map(|(i, mut im)| { im.image_id = format!("im{i}"); im })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.jsonl");
            save_image_passes(&p, &imgs).unwrap();
            prop_assert_eq!(load_image_passes(&p, &PassesSchema::default()).unwrap(), imgs.clone());

            let gt: GroundTruth = imgs
                .iter()
                .map(|im| {
                    let objects = im.passes.iter().flatten()
                        .map(|d| GroundTruthObject { bbox: d.bbox, category: d.argmax() })
                        .collect();
                    (im.image_id.clone(), GroundTruthImage { image_id: im.image_id.clone(), objects })
                })
                .collect();
            let gp = dir.path().join("gt.jsonl");
            save_ground_truth(&gp, &gt).unwrap();
            prop_assert_eq!(load_ground_truth(&gp, 3).unwrap(), gt);

            let manifest = DatasetManifest {
                categories: CategoryCatalog::new(vec!["a".into(), "b".into(), "c".into()]).unwrap(),
                initial_training: vec!["seed".into()],
                pool: imgs.iter().map(|i| i.image_id.clone()).collect(),
                validation: vec![],
                test: vec!["t0".into()],
            };
            let mp = dir.path().join("m.json");
            save_manifest(&mp, &manifest).unwrap();
            prop_assert_eq!(load_manifest(&mp).unwrap(), manifest);
        }
    }
}
