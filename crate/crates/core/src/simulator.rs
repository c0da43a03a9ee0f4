//! Synthetic annotated world and a stochastic detector whose skill grows
//! with the number of annotated instances it has been trained on.
//!
//! The detector stands in for a network evaluated with Monte-Carlo dropout.
//! For an object of category `c` in an image of difficulty `d` the effective
//! skill is `q = skill(c) * (1 - d)` with `skill(c) = e_c / (e_c + k)`. In
//! every pass the object is
//!
//! * detected with probability `p_lo + (p_hi - p_lo) * q`;
//! * localized with Gaussian corner jitter of standard deviation
//!   `(jitter_floor + jitter * (1 - q)) * diagonal`;
//! * scored `q * onehot(c) + (1 - q) * Dirichlet(noise_concentration)`.
//!
//! Each pass also adds `Poisson(false_positive_rate * (1 - mean skill))`
//! spurious boxes with near-uniform scores. The usual confidence and NMS
//! thresholds are then applied.
//!
//! All randomness is drawn from ChaCha8 streams keyed on
//! `(pass_seed, image_id, pass)`. The draws for real objects do not depend
//! on skill, so raising the skill of a category can only make its detections
//! more frequent, tighter and more confident.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detection_io::{
    apply_thresholds, CategoryCatalog, DatasetManifest, Detection, GroundTruth,
    GroundTruthImage, GroundTruthObject, ImagePasses, Thresholds,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// Knobs of the synthetic world generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldParams {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_size: (f64, f64),
    /// Placement retries until an object overlaps every earlier one below this IoU.
    pub max_placement_iou: f64,
    /// Category `c` is drawn with weight `1 / (c + 1)^category_skew`.
    pub category_skew: f64,
    /// Shape parameters of the Beta distribution of image difficulty.
    pub difficulty_alpha: f64,
    pub difficulty_beta: f64,
    pub initial_training: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            width: 800,
            height: 600,
            objects_per_image: (1, 8),
            object_size: (40.0, 160.0),
            max_placement_iou: 0.3,
            category_skew: 1.5,
            difficulty_alpha: 1.5,
            difficulty_beta: 3.0,
            initial_training: 20,
            validation: 30,
            test: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub difficulty: f64,
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub params: WorldParams,
    pub manifest: DatasetManifest,
    pub images: Vec<SyntheticImage>,
}

impl SyntheticWorld {
    pub fn categories(&self) -> usize {
        self.manifest.categories.len()
    }

    pub fn image(&self, image_id: &str) -> Option<&SyntheticImage> {
        self.images
            .binary_search_by(|im| im.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn ground_truth(&self) -> GroundTruth {
        self.images
            .iter()
            .map(|im| {
                (
                    im.image_id.clone(),
                    GroundTruthImage {
                        image_id: im.image_id.clone(),
                        objects: im.objects.clone(),
                    },
                )
            })
            .collect()
    }
}

/// Builds a reproducible world of `image_count` images over `categories`
/// categories and partitions it. The partition sizes in `params` are
/// clamped, in order initial/validation/test, to the images available; the
/// rest forms the pool.
pub fn generate_world(
    seed: u64,
    image_count: usize,
    categories: usize,
    params: &WorldParams,
) -> Result<SyntheticWorld> {
    let catalog = CategoryCatalog::new(
        (0..categories).map(|c| format!("category_{c:02}")).collect(),
    )?;
    let (lo, hi) = params.objects_per_image;
    if lo > hi {
        return Err(Error::Config("objects_per_image range is empty".into()));
    }
    let (smin, smax) = params.object_size;
    if !(smin > 0.0 && smin <= smax && smax < params.width.min(params.height) as f64) {
        return Err(Error::Config("object_size range does not fit the image".into()));
    }
    let difficulty = Beta::new(params.difficulty_alpha, params.difficulty_beta)
        .map_err(|e| Error::Config(format!("difficulty distribution: {e}")))?;
    let weights: Vec<f64> = (0..categories)
        .map(|c| 1.0 / ((c + 1) as f64).powf(params.category_skew))
        .collect();
    let total_weight: f64 = weights.iter().sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(image_count);
    for i in 0..image_count {
        let image_id = format!("img_{i:05}");
        let d = difficulty.sample(&mut rng);
        let count = rng.random_range(lo..=hi);
        let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u = rng.random::<f64>() * total_weight;
            let mut category = categories - 1;
            for (c, w) in weights.iter().enumerate() {
                if u < *w {
                    category = c;
                    break;
                }
                u -= w;
            }
            let mut bbox = random_box(&mut rng, params.width, params.height, params.object_size);
            for _ in 0..1000 {
                if objects
                    .iter()
                    .all(|o| iou(&o.bbox, &bbox) <= params.max_placement_iou)
                {
                    break;
                }
                bbox = random_box(&mut rng, params.width, params.height, params.object_size);
            }
            objects.push(GroundTruthObject { bbox, category });
        }
        images.push(SyntheticImage {
            image_id,
            width: params.width,
            height: params.height,
            difficulty: d,
            objects,
        });
    }

    // partition a shuffled copy of the ids
    let mut ids: Vec<String> = images.iter().map(|im| im.image_id.clone()).collect();
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let mut rest = ids.as_slice();
    let mut take = |n: usize| {
        let n = n.min(rest.len());
        let (head, tail) = rest.split_at(n);
        rest = tail;
        let mut v = head.to_vec();
        v.sort();
        v
    };
    let initial_training = take(params.initial_training);
    let validation = take(params.validation);
    let test = take(params.test);
    let pool = take(usize::MAX);
    let manifest = DatasetManifest {
        categories: catalog,
        initial_training,
        pool,
        validation,
        test,
    };
    manifest.validate()?;
    Ok(SyntheticWorld {
        seed,
        params: params.clone(),
        manifest,
        images,
    })
}

fn random_box(rng: &mut impl Rng, width: u32, height: u32, size: (f64, f64)) -> BoundingBox {
    let w = rng.random_range(size.0..=size.1);
    let h = rng.random_range(size.0..=size.1);
    let x = rng.random_range(0.0..=(width as f64 - w));
    let y = rng.random_range(0.0..=(height as f64 - h));
    BoundingBox::new(x, y, x + w, y + h).expect("positive size")
}

/// Noise model of the simulated detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    /// Exposure at which a category reaches skill 0.5.
    pub half_saturation: f64,
    /// Detection probability at zero and at full effective skill.
    pub detect_floor: f64,
    pub detect_ceiling: f64,
    /// Corner jitter, as a fraction of the box diagonal, at zero skill.
    pub jitter: f64,
    /// Jitter that remains at full skill.
    pub jitter_floor: f64,
    /// Concentration of the symmetric Dirichlet mixed into true detections.
    pub noise_concentration: f64,
    /// Spurious boxes per pass at zero skill.
    pub false_positive_rate: f64,
    /// Concentration of the symmetric Dirichlet used for spurious boxes.
    pub false_positive_concentration: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            half_saturation: 20.0,
            detect_floor: 0.3,
            detect_ceiling: 0.98,
            jitter: 0.15,
            jitter_floor: 0.01,
            noise_concentration: 0.5,
            false_positive_rate: 1.0,
            false_positive_concentration: 20.0,
        }
    }
}

/// Per-category exposure counts plus the detector noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillState {
    pub exposure: Vec<u64>,
    pub params: DetectorParams,
}

impl SkillState {
    pub fn untrained(categories: usize, params: DetectorParams) -> Self {
        SkillState {
            exposure: vec![0; categories],
            params,
        }
    }

    /// `e_c / (e_c + k)`.
    pub fn skill(&self, category: usize) -> f64 {
        let e = self.exposure[category] as f64;
        e / (e + self.params.half_saturation)
    }

    pub fn mean_skill(&self) -> f64 {
        if self.exposure.is_empty() {
            return 0.0;
        }
        (0..self.exposure.len()).map(|c| self.skill(c)).sum::<f64>() / self.exposure.len() as f64
    }
}

/// Adds the instances of each newly annotated image to the exposure counts.
pub fn train_update<'a>(
    skill: &SkillState,
    newly_annotated: impl IntoIterator<Item = &'a GroundTruthImage>,
) -> SkillState {
    let mut next = skill.clone();
    for img in newly_annotated {
        for o in &img.objects {
            next.exposure[o.category] += 1;
        }
    }
    next
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a, used to key random streams on image ids.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn stream(pass_seed: u64, image_id: &str, pass: usize, salt: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(pass_seed) ^ fnv1a(image_id)) ^ pass as u64) ^ salt;
    ChaCha8Rng::seed_from_u64(key)
}

fn dirichlet(rng: &mut impl RngCore, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut v: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / k as f64);
    }
    v
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x = (*x / s).clamp(0.0, 1.0));
    v
}

/// Clamps a jittered box into the image and keeps at least one pixel per side.
fn clamp_box(c: [f64; 4], width: f64, height: f64) -> BoundingBox {
    let fix = |lo: f64, hi: f64, limit: f64| {
        let (mut lo, mut hi) = (lo.min(hi).clamp(0.0, limit), lo.max(hi).clamp(0.0, limit));
        if hi - lo < 1.0 {
            let mid = ((lo + hi) / 2.0).clamp(0.5, limit - 0.5);
            lo = mid - 0.5;
            hi = mid + 0.5;
        }
        (lo, hi)
    };
    let (x0, x1) = fix(c[0], c[2], width);
    let (y0, y1) = fix(c[1], c[3], height);
    BoundingBox::new(x0, y0, x1, y1).expect("clamped box has positive area")
}

/// Runs `passes` simulated stochastic forward passes over one image and
/// applies `thresholds` to each.
pub fn simulate_passes(
    image: &SyntheticImage,
    skill: &SkillState,
    passes: usize,
    pass_seed: u64,
    thresholds: &Thresholds,
) -> ImagePasses {
    let p = &skill.params;
    let k = skill.exposure.len();
    let (w, h) = (image.width as f64, image.height as f64);
    let fp_rate = p.false_positive_rate * (1.0 - skill.mean_skill());
    let mut out = Vec::with_capacity(passes);
    for pass in 0..passes {
        let mut rng = stream(pass_seed, &image.image_id, pass, 0);
        let mut dets = Vec::new();
        for obj in &image.objects {
            let q = skill.skill(obj.category) * (1.0 - image.difficulty);
            let u: f64 = rng.random();
            let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let noise = dirichlet(&mut rng, k, p.noise_concentration);
            let p_det = (p.detect_floor + (p.detect_ceiling - p.detect_floor) * q).clamp(0.0, 1.0);
            if u >= p_det {
                continue;
            }
            let sigma = (p.jitter_floor + p.jitter * (1.0 - q)) * obj.bbox.diagonal();
            let corners = obj.bbox.to_array();
            let jittered = std::array::from_fn(|i| corners[i] + sigma * z[i]);
            let scores = noise
                .iter()
                .enumerate()
                .map(|(c, n)| (1.0 - q) * n + if c == obj.category { q } else { 0.0 })
                .collect();
            dets.push(Detection::new(clamp_box(jittered, w, h), normalized(scores)));
        }
        let mut fp_rng = stream(pass_seed, &image.image_id, pass, 0x5eed_f00d);
        let n_fp = if fp_rate > 0.0 {
            Poisson::new(fp_rate).expect("positive rate").sample(&mut fp_rng) as usize
        } else {
            0
        };
        for _ in 0..n_fp {
            let bbox = random_box(&mut fp_rng, image.width, image.height, image.params_size());
            let scores = dirichlet(&mut fp_rng, k, p.false_positive_concentration);
            dets.push(Detection::new(bbox, normalized(scores)));
        }
        out.push(dets);
    }
    apply_thresholds(
        &ImagePasses {
            image_id: image.image_id.clone(),
            width: image.width,
            height: image.height,
            passes: out,
        },
        thresholds,
    )
}

impl SyntheticImage {
    /// Size range used for spurious boxes: a fifth to a third of the shorter side.
    fn params_size(&self) -> (f64, f64) {
        let s = self.width.min(self.height) as f64;
        (s / 5.0, s / 3.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::certainty::{rank_pool, CertaintyParams, CertaintyTriple};
    use crate::evaluation::{consolidate, f1_image};
    use crate::grouping::group_passes;

    fn world(seed: u64, n: usize, k: usize) -> SyntheticWorld {
        generate_world(seed, n, k, &WorldParams::default()).unwrap()
    }

    #[test]
    fn generation_is_reproducible() {
        let a = serde_json::to_vec(&world(9, 60, 4)).unwrap();
        let b = serde_json::to_vec(&world(9, 60, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, serde_json::to_vec(&world(10, 60, 4)).unwrap());
    }

    #[test]
    fn empty_world() {
        let w = world(1, 0, 3);
        assert!(w.images.is_empty());
        assert_eq!(w.manifest.all_ids().count(), 0);
    }

    #[test]
    fn fixed_object_count_and_partitions() {
        let params = WorldParams {
            objects_per_image: (3, 3),
            ..WorldParams::default()
        };
        let w = generate_world(4, 200, 5, &params).unwrap();
        assert!(w.images.iter().all(|im| im.objects.len() == 3));
        assert!(w.manifest.validate().is_ok());
        assert_eq!(w.manifest.all_ids().count(), 200);
        assert_eq!(w.manifest.pool.len(), 100);
        assert!(w.images.iter().all(|im| (0.0..=1.0).contains(&im.difficulty)));
    }

    #[test]
    fn train_update_counts_instances() {
        let s = SkillState::untrained(5, DetectorParams::default());
        let img = GroundTruthImage {
            image_id: "x".into(),
            objects: vec![
                GroundTruthObject { bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), category: 3 },
                GroundTruthObject { bbox: BoundingBox::new(2.0, 0.0, 3.0, 1.0).unwrap(), category: 3 },
            ],
        };
        let next = train_update(&s, [&img]);
        assert_eq!(next.exposure, vec![0, 0, 0, 2, 0]);
        assert!(next.skill(3) >= s.skill(3));
        assert_eq!(train_update(&s, []), s);
    }

    #[test]
    fn passes_are_deterministic() {
        let w = world(3, 10, 4);
        let skill = SkillState::untrained(4, DetectorParams::default());
        let im = &w.images[0];
        let a = simulate_passes(im, &skill, 15, 77, &Thresholds::default());
        assert_eq!(a, simulate_passes(im, &skill, 15, 77, &Thresholds::default()));
        assert_eq!(a.pass_count(), 15);
    }

    #[test]
    fn saturated_skill_recovers_ground_truth() {
        let params = WorldParams {
            difficulty_alpha: 1.0,
            difficulty_beta: 1e6,
            ..WorldParams::default()
        };
        let w = generate_world(5, 20, 4, &params).unwrap();
        let det = DetectorParams {
            jitter_floor: 0.0,
            detect_ceiling: 1.0,
            ..DetectorParams::default()
        };
        let skill = SkillState {
            exposure: vec![1_000_000; 4],
            params: det,
        };
        let cp = CertaintyParams::new(4, 15);
        for im in &w.images {
            assert!(im.difficulty < 1e-3);
            let passes = simulate_passes(im, &skill, 15, 1, &Thresholds::default());
            let sets = group_passes(&passes, 0.5);
            for s in &sets {
                let t = CertaintyTriple::of_set(s, 4, 15).unwrap();
                assert!(t.semantic > 0.99 && t.spatial > 0.99, "{t:?}");
            }
            let gt = GroundTruthImage { image_id: im.image_id.clone(), objects: im.objects.clone() };
            // objects may overlap up to the placement bound and be merged by NMS
            assert!(f1_image(&consolidate(&sets), &gt, 0.5).f1 > 0.7);
            let ranked = rank_pool(std::slice::from_ref(&passes), &cp).unwrap();
            assert!(ranked[0].c_min > 0.9, "{}", ranked[0].c_min);
        }
    }

    #[test]
    fn unskilled_binary_detector_is_semantically_uncertain() {
        let w = world(8, 300, 2);
        let det = DetectorParams {
            noise_concentration: 4.0,
            ..DetectorParams::default()
        };
        let skill = SkillState::untrained(2, det);
        let mut total = 0.0;
        let mut n = 0usize;
        for im in &w.images {
            let passes = simulate_passes(im, &skill, 15, 11, &Thresholds::default());
            for s in group_passes(&passes, 0.5) {
                total += crate::certainty::semantic_certainty(&s, 2).unwrap();
                n += 1;
            }
        }
        assert!(n >= 500, "only {n} sets");
        let mean = total / n as f64;
        assert!(mean < 0.2, "mean c_sem {mean}");
    }
}
