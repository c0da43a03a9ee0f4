//! The active-learning loop and its run directory.
//!
//! A run directory holds everything needed to resume a run:
//!
//! ```text
//! RUNDIR/
//!   config.toml            run configuration (absolute data paths)
//!   state/iter_N.json      state at the start of iteration N
//!   log.csv                one row per finished iteration
//!   events.jsonl           append-only event log
//!   samples/iter_N.txt     ids annotated at iteration N
//!   trainset_iterN.txt     training set of the model of iteration N
//!   detections/iter_N.jsonl passes predicted at iteration N
//!   requests/              adapter request documents, id lists, sentinels
//!   lock                   present while a process owns the directory
//! ```
//!
//! The state file of iteration `N + 1` is written atomically once iteration
//! `N` is complete, so a run interrupted at any point resumes from the last
//! finished iteration.

mod adapter;
mod config;
mod simulate;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use adapter::{
    write_sentinel, AdapterRequest, DetectorAdapter, ExternalAdapter, PredictRequest,
    SimulatorAdapter, TrainRequest,
};
pub use config::RunConfig;
pub use simulate::{init_simulated_run, simulate_run, simulator_adapter, SimulationConfig};

use crate::certainty::rank_pool;
use crate::detection_io::{
    apply_thresholds, load_ground_truth, load_manifest, DatasetManifest, GroundTruth, ImagePasses,
    PassesSchema,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    coco_map, consolidate, f1_image, ttest_two_sided, FinalPrediction, Predictions, TTestResult,
};
use crate::fsutil::{self, read_jsonl, write_id_list};
use crate::grouping::group_passes;
use crate::sampling::{sample_min_certainty, sample_random, Strategy};

/// One image chosen for annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledImage {
    pub image_id: String,
    pub c_min: f64,
    /// F1 of the model's consolidated predictions before annotation.
    pub f1: f64,
}

/// What happened at one iteration. The evaluation-only row written after the
/// last iteration has no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub training_size: usize,
    pub epochs: u32,
    /// mAP on the test split; `None` when it holds no objects.
    pub map: Option<f64>,
    pub validation_map: Option<f64>,
    pub sampled: Vec<SampledImage>,
    pub mean_c_min_sampled: Option<f64>,
    pub mean_f1_sampled: Option<f64>,
    pub mean_f1_remaining: Option<f64>,
    /// Sampled versus remaining pool F1.
    pub ttest: Option<TTestResult>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveLearningState {
    pub iteration: usize,
    pub training: Vec<String>,
    pub pool: Vec<String>,
    /// Iteration whose model the adapter has been asked to train.
    pub trained_iteration: Option<usize>,
    pub records: Vec<IterationRecord>,
    pub final_evaluation: Option<IterationRecord>,
}

impl ActiveLearningState {
    pub fn initial(manifest: &DatasetManifest) -> Self {
        let mut training = manifest.initial_training.clone();
        let mut pool = manifest.pool.clone();
        training.sort();
        pool.sort();
        ActiveLearningState {
            iteration: 0,
            training,
            pool,
            trained_iteration: None,
            records: Vec::new(),
            final_evaluation: None,
        }
    }

    /// Training set, pool, validation and test are pairwise disjoint and
    /// together cover the manifest.
    pub fn check_conservation(&self, manifest: &DatasetManifest) -> Result<()> {
        let mut seen = BTreeSet::new();
        let parts = [
            &self.training,
            &self.pool,
            &manifest.validation,
            &manifest.test,
        ];
        for id in parts.into_iter().flatten() {
            if !seen.insert(id.as_str()) {
                return Err(Error::contract(format!("image `{id}` is in two partitions")));
            }
        }
        let expected: BTreeSet<&str> = manifest.all_ids().map(String::as_str).collect();
        if seen != expected {
            return Err(Error::contract("state does not cover the manifest"));
        }
        Ok(())
    }

    /// All log rows, including the final evaluation.
    pub fn rows(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().chain(&self.final_evaluation)
    }
}

/// Two-sided t-test of per-image F1, sampled versus remaining pool. `None`
/// unless both groups have at least two images.
pub fn compare_sampled_vs_remaining(sampled: &[f64], remaining: &[f64]) -> Option<TTestResult> {
    if sampled.len() < 2 || remaining.len() < 2 {
        return None;
    }
    ttest_two_sided(sampled, remaining).ok()
}

/// Column order of `log.csv`.
pub const LOG_COLUMNS: [&str; 11] = [
    "iteration",
    "training_size",
    "epochs",
    "map",
    "validation_map",
    "mean_c_min_sampled",
    "mean_f1_sampled",
    "mean_f1_remaining",
    "t",
    "df",
    "p",
];

/// Renders the log. Floats use the shortest representation that parses back
/// to the same value; missing values are empty.
pub fn render_log(state: &ActiveLearningState) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|v| v.to_string()).unwrap_or_default()
    }
    let mut s = LOG_COLUMNS.join(",");
    s.push('\n');
    for r in state.rows() {
        let cells = [
            r.iteration.to_string(),
            r.training_size.to_string(),
            r.epochs.to_string(),
            opt(r.map),
            opt(r.validation_map),
            opt(r.mean_c_min_sampled),
            opt(r.mean_f1_sampled),
            opt(r.mean_f1_remaining),
            opt(r.ttest.map(|t| t.t)),
            r.ttest.map(|t| t.df.to_string()).unwrap_or_default(),
            opt(r.ttest.map(|t| t.p)),
        ];
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked { path: dir.to_path_buf() })
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn state_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("state").join(format!("iter_{iteration}.json"))
}

/// Reads the state of the latest iteration in a run directory.
pub fn load_latest_state(dir: &Path) -> Result<ActiveLearningState> {
    let state_dir = dir.join("state");
    let entries = fs::read_dir(&state_dir).map_err(|e| Error::io(&state_dir, e))?;
    let mut latest = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&state_dir, e))?;
        let name = entry.file_name();
        let n = name
            .to_str()
            .and_then(|n| n.strip_prefix("iter_"))
            .and_then(|n| n.strip_suffix(".json"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(n) = n {
            latest = latest.max(Some(n));
        }
    }
    let n = latest.ok_or_else(|| Error::Config(format!("no state in {}", state_dir.display())))?;
    let path = state_path(dir, n);
    Ok(serde_json::from_str(&fsutil::read_to_string(&path)?)?)
}

/// An open run directory. Holds the directory lock until dropped.
pub struct Run {
    dir: PathBuf,
    config: RunConfig,
    manifest: DatasetManifest,
    ground_truth: GroundTruth,
    state: ActiveLearningState,
    _lock: RunLock,
}

impl std::fmt::Debug for Run {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Run")
            .field("dir", &self.dir)
            .field("iteration", &self.state.iteration)
            .finish()
    }
}

impl Run {
    /// Creates a run directory. `config.manifest` and `config.ground_truth`
    /// must be set; they are stored as absolute paths.
    pub fn init(dir: &Path, config: &RunConfig) -> Result<Run> {
        config.validate()?;
        let mut config = config.clone();
        let absolute = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
            let p = p
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{what} path is not set")))?;
            std::path::absolute(p).map_err(|e| Error::io(p, e))
        };
        config.manifest = Some(absolute(&config.manifest, "manifest")?);
        config.ground_truth = Some(absolute(&config.ground_truth, "ground_truth")?);

        let manifest = load_manifest(config.manifest.as_deref().expect("set above"))?;
        let ground_truth = load_ground_truth(
            config.ground_truth.as_deref().expect("set above"),
            manifest.categories.len(),
        )?;
        if let Some(id) = manifest.all_ids().find(|id| !ground_truth.contains_key(*id)) {
            return Err(Error::Manifest(format!("image `{id}` has no ground truth")));
        }

        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = RunLock::acquire(dir)?;
        if dir.join("state").exists() {
            return Err(Error::Config(format!(
                "{} already contains a run",
                dir.display()
            )));
        }
        config.save(&dir.join("config.toml"))?;
        let run = Run {
            dir: dir.to_path_buf(),
            config,
            state: ActiveLearningState::initial(&manifest),
            manifest,
            ground_truth,
            _lock: lock,
        };
        run.persist()?;
        run.event(serde_json::json!({
            "event": "init",
            "training": run.state.training.len(),
            "pool": run.state.pool.len(),
        }))?;
        Ok(run)
    }

    /// Opens an existing run directory at its latest state.
    pub fn open(dir: &Path) -> Result<Run> {
        let lock = RunLock::acquire(dir)?;
        let config = RunConfig::load(&dir.join("config.toml"))?;
        let manifest_path = config
            .manifest
            .clone()
            .ok_or_else(|| Error::Config("manifest path is not set".into()))?;
        let gt_path = config
            .ground_truth
            .clone()
            .ok_or_else(|| Error::Config("ground_truth path is not set".into()))?;
        let manifest = load_manifest(&manifest_path)?;
        let ground_truth = load_ground_truth(&gt_path, manifest.categories.len())?;
        let state = load_latest_state(dir)?;
        state.check_conservation(&manifest)?;
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
            manifest,
            ground_truth,
            state,
            _lock: lock,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn state(&self) -> &ActiveLearningState {
        &self.state
    }

    /// An external adapter with the configured timeout and poll interval.
    pub fn external_adapter(&self) -> ExternalAdapter {
        ExternalAdapter::new(
            Duration::from_secs(self.config.adapter_timeout_secs),
            Duration::from_millis(self.config.adapter_poll_ms),
        )
    }

    /// Whether the pool still holds a full batch.
    pub fn can_iterate(&self) -> bool {
        self.state.pool.len() >= self.config.batch_size
    }

    fn persist(&self) -> Result<()> {
        persist_state(&self.dir, &self.state)
    }

    fn event(&self, mut body: serde_json::Value) -> Result<()> {
        body["unix_ms"] = now_ms().into();
        body["iteration"] = self.state.iteration.into();
        let path = self.dir.join("events.jsonl");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut line = serde_json::to_vec(&body)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| Error::io(&path, e))
    }

    fn trainset_path(&self, iteration: usize) -> PathBuf {
        self.dir.join(format!("trainset_iter{iteration}.txt"))
    }

    fn write_request(&self, name: &str, request: &AdapterRequest) -> Result<()> {
        let _ = fs::remove_file(request.sentinel());
        let mut bytes = serde_json::to_vec_pretty(request)?;
        bytes.push(b'\n');
        fsutil::write_atomic(&self.dir.join("requests").join(format!("{name}.json")), &bytes)
    }

    fn train(&self, adapter: &mut dyn DetectorAdapter, iteration: usize, training: &[String]) -> Result<()> {
        let trainset = self.trainset_path(iteration);
        write_id_list(&trainset, training)?;
        let request = TrainRequest {
            iteration,
            epochs: self.config.epoch_budget(iteration),
            dropout: self.config.dropout,
            trainset,
            sentinel: self
                .dir
                .join("requests")
                .join(format!("train_iter{iteration}.done")),
        };
        self.write_request(
            &format!("train_iter{iteration}"),
            &AdapterRequest::Train(request.clone()),
        )?;
        adapter.train(&request)?;
        self.event(serde_json::json!({
            "event": "trained",
            "model_iteration": iteration,
            "epochs": request.epochs,
            "training": training.len(),
        }))
    }

    /// Makes sure the model of the current iteration exists.
    fn ensure_trained(&mut self, adapter: &mut dyn DetectorAdapter) -> Result<()> {
        let i = self.state.iteration;
        if self.state.trained_iteration != Some(i) {
            self.train(adapter, i, &self.state.training)?;
            self.state.trained_iteration = Some(i);
            self.persist()?;
        }
        Ok(())
    }

    /// Thresholded passes for `ids` from the current model, keyed by id.
    fn predict(
        &self,
        adapter: &mut dyn DetectorAdapter,
        ids: &[String],
    ) -> Result<BTreeMap<String, ImagePasses>> {
        let i = self.state.iteration;
        let requests = self.dir.join("requests");
        let id_list = requests.join(format!("predict_iter{i}_ids.txt"));
        write_id_list(&id_list, ids)?;
        let request = PredictRequest {
            iteration: i,
            passes: self.config.passes,
            dropout: self.config.dropout,
            trainset: self.trainset_path(i),
            image_ids: id_list,
            output: self.dir.join("detections").join(format!("iter_{i}.jsonl")),
            sentinel: requests.join(format!("predict_iter{i}.done")),
        };
        self.write_request(
            &format!("predict_iter{i}"),
            &AdapterRequest::Predict(request.clone()),
        )?;
        let schema = PassesSchema::new(self.config.passes, self.manifest.categories.len());
        let thresholds = self.config.thresholds();
        let mut out = BTreeMap::new();
        for img in adapter.predict(&request, &schema)? {
            img.validate(&schema)?;
            let img = apply_thresholds(&img, &thresholds);
            if out.insert(img.image_id.clone(), img).is_some() {
                return Err(Error::Adapter("duplicate image in detections".into()));
            }
        }
        if out.len() != ids.len() || ids.iter().any(|id| !out.contains_key(id)) {
            return Err(Error::Adapter(
                "detections do not cover exactly the requested images".into(),
            ));
        }
        Ok(out)
    }

    fn final_predictions(&self, passes: &ImagePasses) -> Vec<FinalPrediction> {
        consolidate(&group_passes(passes, self.config.match_iou))
    }

    fn f1(&self, id: &str, preds: &[FinalPrediction]) -> f64 {
        f1_image(preds, &self.ground_truth[id], self.config.f1_iou).f1
    }

    /// mAP over `ids`; `None` when they contain no objects.
    fn split_map(&self, ids: &[String], predictions: &Predictions) -> Result<Option<f64>> {
        let gt: GroundTruth = ids
            .iter()
            .map(|id| (id.clone(), self.ground_truth[id].clone()))
            .collect();
        if gt.values().all(|g| g.objects.is_empty()) {
            return Ok(None);
        }
        let r = coco_map(predictions, &gt, self.manifest.categories.len(), self.config.f1_iou)?;
        Ok(Some(r.map))
    }

    /// Runs one iteration: rank or draw, annotate, retrain, persist. On error
    /// the persisted state is left at the start of the iteration.
    pub fn run_iteration(&mut self, adapter: &mut dyn DetectorAdapter) -> Result<&IterationRecord> {
        let i = self.state.iteration;
        let n = self.config.batch_size;
        if self.state.pool.len() < n {
            return Err(Error::contract(format!(
                "pool holds {} images, batch size is {n}",
                self.state.pool.len()
            )));
        }
        let started_ms = now_ms();
        self.ensure_trained(adapter)?;

        let mut ids: Vec<String> = self
            .state
            .pool
            .iter()
            .chain(&self.manifest.validation)
            .chain(&self.manifest.test)
            .cloned()
            .collect();
        ids.sort();
        let passes = self.predict(adapter, &ids)?;

        let pool_passes: Vec<ImagePasses> =
            self.state.pool.iter().map(|id| passes[id].clone()).collect();
        let params = self.config.certainty_params(self.manifest.categories.len());
        let ranking = rank_pool(&pool_passes, &params)?;
        let c_min: BTreeMap<&str, f64> = ranking
            .iter()
            .map(|r| (r.image_id.as_str(), r.c_min))
            .collect();
        let mut chosen = match self.config.strategy {
            Strategy::MinCertainty => {
                let pairs: Vec<(&str, f64)> =
                    ranking.iter().map(|r| (r.image_id.as_str(), r.c_min)).collect();
                sample_min_certainty(&pairs, n)?
            }
            Strategy::Random => sample_random(&self.state.pool, n, self.config.seed, i as u64)?,
        };
        chosen.sort();
        let chosen_set: BTreeSet<&str> = chosen.iter().map(String::as_str).collect();

        let predictions: Predictions = passes
            .iter()
            .map(|(id, p)| (id.clone(), self.final_predictions(p)))
            .collect();
        let sampled: Vec<SampledImage> = chosen
            .iter()
            .map(|id| SampledImage {
                image_id: id.clone(),
                c_min: c_min[id.as_str()],
                f1: self.f1(id, &predictions[id]),
            })
            .collect();
        let sampled_f1: Vec<f64> = sampled.iter().map(|s| s.f1).collect();
        let remaining_f1: Vec<f64> = self
            .state
            .pool
            .iter()
            .filter(|id| !chosen_set.contains(id.as_str()))
            .map(|id| self.f1(id, &predictions[id]))
            .collect();
        let c_mins: Vec<f64> = sampled.iter().map(|s| s.c_min).collect();

        let record = IterationRecord {
            iteration: i,
            training_size: self.state.training.len(),
            epochs: self.config.epoch_budget(i),
            map: self.split_map(&self.manifest.test, &predictions)?,
            validation_map: self.split_map(&self.manifest.validation, &predictions)?,
            mean_c_min_sampled: mean(&c_mins),
            mean_f1_sampled: mean(&sampled_f1),
            mean_f1_remaining: mean(&remaining_f1),
            ttest: compare_sampled_vs_remaining(&sampled_f1, &remaining_f1),
            sampled,
            started_ms,
            finished_ms: 0,
        };

        write_id_list(&self.dir.join("samples").join(format!("iter_{i}.txt")), &chosen)?;
        let mut next = self.state.clone();
        next.pool.retain(|id| !chosen_set.contains(id.as_str()));
        next.training.extend(chosen.iter().cloned());
        next.training.sort();
        self.train(adapter, i + 1, &next.training)?;

        next.iteration = i + 1;
        next.trained_iteration = Some(i + 1);
        next.final_evaluation = None;
        next.records.push(IterationRecord {
            finished_ms: now_ms(),
            ..record
        });
        next.check_conservation(&self.manifest)?;
        persist_state(&self.dir, &next)?;
        self.state = next;
        self.write_log()?;
        let last = self.state.records.last().expect("just pushed");
        self.event(serde_json::json!({
            "event": "iteration",
            "sampled": chosen,
            "map": last.map,
        }))?;
        Ok(last)
    }

    /// Evaluates the current model without sampling and records it as the
    /// final row of the log.
    pub fn evaluate_final(&mut self, adapter: &mut dyn DetectorAdapter) -> Result<&IterationRecord> {
        let started_ms = now_ms();
        self.ensure_trained(adapter)?;
        let mut ids: Vec<String> = self
            .manifest
            .validation
            .iter()
            .chain(&self.manifest.test)
            .cloned()
            .collect();
        ids.sort();
        let predictions: Predictions = if ids.is_empty() {
            Predictions::new()
        } else {
            self.predict(adapter, &ids)?
                .iter()
                .map(|(id, p)| (id.clone(), self.final_predictions(p)))
                .collect()
        };
        let i = self.state.iteration;
        self.state.final_evaluation = Some(IterationRecord {
            iteration: i,
            training_size: self.state.training.len(),
            epochs: self.config.epoch_budget(i),
            map: self.split_map(&self.manifest.test, &predictions)?,
            validation_map: self.split_map(&self.manifest.validation, &predictions)?,
            sampled: Vec::new(),
            mean_c_min_sampled: None,
            mean_f1_sampled: None,
            mean_f1_remaining: None,
            ttest: None,
            started_ms,
            finished_ms: now_ms(),
        });
        self.persist()?;
        self.write_log()?;
        self.event(serde_json::json!({ "event": "final_evaluation" }))?;
        Ok(self.state.final_evaluation.as_ref().expect("just set"))
    }

    /// Runs `iterations` iterations, then the final evaluation.
    pub fn run_loop(
        &mut self,
        adapter: &mut dyn DetectorAdapter,
        iterations: usize,
    ) -> Result<&ActiveLearningState> {
        for _ in 0..iterations {
            self.run_iteration(adapter)?;
        }
        self.evaluate_final(adapter)?;
        Ok(&self.state)
    }

    fn write_log(&self) -> Result<()> {
        fsutil::write_atomic(&self.dir.join("log.csv"), render_log(&self.state).as_bytes())
    }
}

fn persist_state(dir: &Path, state: &ActiveLearningState) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(state)?;
    bytes.push(b'\n');
    fsutil::write_atomic(&state_path(dir, state.iteration), &bytes)
}

/// Loads the `detections/iter_N.jsonl` file of a run.
pub fn load_run_detections(dir: &Path, iteration: usize) -> Result<Vec<ImagePasses>> {
    read_jsonl(&dir.join("detections").join(format!("iter_{iteration}.jsonl")))
}
