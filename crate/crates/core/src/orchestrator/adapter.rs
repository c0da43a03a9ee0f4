//! The boundary between the engine and whatever produces detections.
//!
//! For every request the orchestrator writes a JSON request document under
//! `requests/` together with the id lists it references, then hands the
//! request to a [`DetectorAdapter`]. An external adapter is a separate
//! process that watches for request documents, writes its outputs, and
//! finally creates the sentinel file named in the request. A sentinel whose
//! first line starts with `error` marks the request as failed.
//!
//! Train request: retrain on the ids in `trainset` with `epochs` epochs.
//! Warm or cold start is up to the adapter.
//!
//! Predict request: run `passes` stochastic forward passes over every id in
//! `image_ids` and write them to `output` in the detections format.

use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection_io::{
    load_image_passes, save_image_passes, GroundTruthImage, ImagePasses, PassesSchema, Thresholds,
};
use crate::error::{Error, Result};
use crate::fsutil::{self, read_id_list};
use crate::simulator::{simulate_passes, train_update, DetectorParams, SkillState, SyntheticWorld};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub iteration: usize,
    pub epochs: u32,
    pub dropout: f64,
    pub trainset: PathBuf,
    pub sentinel: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Iteration whose model must be used.
    pub iteration: usize,
    pub passes: usize,
    pub dropout: f64,
    /// Training set of that model, for adapters that rebuild it on demand.
    pub trainset: PathBuf,
    pub image_ids: PathBuf,
    pub output: PathBuf,
    pub sentinel: PathBuf,
}

/// Request document as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterRequest {
    Train(TrainRequest),
    Predict(PredictRequest),
}

impl AdapterRequest {
    pub fn sentinel(&self) -> &Path {
        match self {
            AdapterRequest::Train(r) => &r.sentinel,
            AdapterRequest::Predict(r) => &r.sentinel,
        }
    }
}

pub trait DetectorAdapter {
    fn train(&mut self, request: &TrainRequest) -> Result<()>;

    /// Returns the passes for exactly the requested ids.
    fn predict(&mut self, request: &PredictRequest, schema: &PassesSchema)
        -> Result<Vec<ImagePasses>>;
}

/// Marks a request as done.
pub fn write_sentinel(path: &Path, outcome: std::result::Result<(), &str>) -> Result<()> {
    let body = match outcome {
        Ok(()) => "ok\n".to_string(),
        Err(msg) => format!("error: {msg}\n"),
    };
    fsutil::write_atomic(path, body.as_bytes())
}

/// Waits for request sentinels written by another process.
#[derive(Debug, Clone)]
pub struct ExternalAdapter {
    pub timeout: Duration,
    pub poll: Duration,
}

impl ExternalAdapter {
    pub fn new(timeout: Duration, poll: Duration) -> Self {
        ExternalAdapter { timeout, poll }
    }

    fn wait(&self, sentinel: &Path) -> Result<()> {
        let start = Instant::now();
        loop {
            if sentinel.exists() {
                let body = fsutil::read_to_string(sentinel)?;
                let first = body.lines().next().unwrap_or("").trim();
                return if let Some(msg) = first.strip_prefix("error") {
                    Err(Error::Adapter(format!(
                        "{} failed: {}",
                        sentinel.display(),
                        msg.trim_start_matches(':').trim()
                    )))
                } else {
                    Ok(())
                };
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::Adapter(format!(
                    "timed out after {:?} waiting for {}",
                    self.timeout,
                    sentinel.display()
                )));
            }
            thread::sleep(self.poll);
        }
    }
}

impl DetectorAdapter for ExternalAdapter {
    fn train(&mut self, request: &TrainRequest) -> Result<()> {
        self.wait(&request.sentinel)
    }

    fn predict(
        &mut self,
        request: &PredictRequest,
        schema: &PassesSchema,
    ) -> Result<Vec<ImagePasses>> {
        self.wait(&request.sentinel)?;
        load_image_passes(&request.output, schema)
    }
}

/// In-process adapter backed by the synthetic detector.
///
/// Training recomputes the exposure counts from the full training set, so
/// the adapter holds no state a resumed run could miss.
#[derive(Debug, Clone)]
pub struct SimulatorAdapter {
    world: SyntheticWorld,
    detector: DetectorParams,
    pass_seed: u64,
    thresholds: Thresholds,
    write_detections: bool,
    skill: Option<(usize, SkillState)>,
}

impl SimulatorAdapter {
    pub fn new(
        world: SyntheticWorld,
        detector: DetectorParams,
        pass_seed: u64,
        thresholds: Thresholds,
    ) -> Self {
        SimulatorAdapter {
            world,
            detector,
            pass_seed,
            thresholds,
            write_detections: true,
            skill: None,
        }
    }

    /// Whether predict requests also write the detections file.
    pub fn write_detections(mut self, yes: bool) -> Self {
        self.write_detections = yes;
        self
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    pub fn skill(&self) -> Option<&SkillState> {
        self.skill.as_ref().map(|(_, s)| s)
    }

    fn annotations(&self, ids: &[String]) -> Result<Vec<GroundTruthImage>> {
        ids.iter()
            .map(|id| {
                self.world
                    .image(id)
                    .map(|im| GroundTruthImage {
                        image_id: im.image_id.clone(),
                        objects: im.objects.clone(),
                    })
                    .ok_or_else(|| Error::Adapter(format!("unknown image `{id}`")))
            })
            .collect()
    }

    fn fit(&mut self, iteration: usize, trainset: &Path) -> Result<()> {
        let ids = read_id_list(trainset)?;
        let annotated = self.annotations(&ids)?;
        let fresh = SkillState::untrained(self.world.categories(), self.detector.clone());
        self.skill = Some((iteration, train_update(&fresh, &annotated)));
        Ok(())
    }
}

impl DetectorAdapter for SimulatorAdapter {
    fn train(&mut self, request: &TrainRequest) -> Result<()> {
        self.fit(request.iteration, &request.trainset)?;
        write_sentinel(&request.sentinel, Ok(()))
    }

    fn predict(
        &mut self,
        request: &PredictRequest,
        _schema: &PassesSchema,
    ) -> Result<Vec<ImagePasses>> {
        if self.skill.as_ref().map(|(it, _)| *it) != Some(request.iteration) {
            // a resumed process has no model in memory yet
            self.fit(request.iteration, &request.trainset)?;
        }
        let skill = &self.skill.as_ref().expect("fitted above").1;
        let ids = read_id_list(&request.image_ids)?;
        let images = ids
            .iter()
            .map(|id| {
                self.world
                    .image(id)
                    .ok_or_else(|| Error::Adapter(format!("unknown image `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let out: Vec<ImagePasses> = images
            .par_iter()
            .map(|im| simulate_passes(im, skill, request.passes, self.pass_seed, &self.thresholds))
            .collect();
        if self.write_detections {
            save_image_passes(&request.output, &out)?;
        }
        write_sentinel(&request.sentinel, Ok(()))?;
        Ok(out)
    }
}
