use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::certainty::CertaintyParams;
use crate::detection_io::Thresholds;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::sampling::Strategy;

/// Flat key-value run configuration, stored as TOML.
///
/// ```toml
/// passes = 15
/// dropout = 0.75
/// confidence = 0.5
/// nms_iou = 0.3
/// match_iou = 0.5
/// f1_iou = 0.5
/// batch_size = 100
/// iterations = 10
/// epochs_base = 5
/// epochs_increment = 5
/// strategy = "min_certainty"
/// seed = 0
/// manifest = "manifest.json"
/// ground_truth = "ground_truth.jsonl"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Stochastic forward passes per image.
    pub passes: usize,
    /// Dropout probability of the detector. Recorded and forwarded to the
    /// adapter; the engine itself never applies dropout.
    pub dropout: f64,
    pub confidence: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub f1_iou: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub epochs_base: u32,
    pub epochs_increment: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    /// Keep every iteration's detections under `detections/`.
    pub keep_detections: bool,
    /// How long an external adapter may take per request.
    pub adapter_timeout_secs: u64,
    pub adapter_poll_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            passes: 15,
            dropout: 0.75,
            confidence: 0.5,
            nms_iou: 0.3,
            match_iou: 0.5,
            f1_iou: 0.5,
            batch_size: 100,
            iterations: 10,
            epochs_base: 5,
            epochs_increment: 5,
            strategy: Strategy::MinCertainty,
            seed: 0,
            manifest: None,
            ground_truth: None,
            keep_detections: true,
            adapter_timeout_secs: 24 * 3600,
            adapter_poll_ms: 500,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dropout", self.dropout),
            ("confidence", self.confidence),
            ("nms_iou", self.nms_iou),
            ("match_iou", self.match_iou),
            ("f1_iou", self.f1_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if self.passes < 2 {
            return Err(Error::Config("passes must be at least 2".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Training epochs at iteration `i`: `epochs_base + epochs_increment * i`.
    pub fn epoch_budget(&self, iteration: usize) -> u32 {
        self.epochs_base + self.epochs_increment * iteration as u32
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            confidence: self.confidence,
            nms_iou: self.nms_iou,
        }
    }

    pub fn certainty_params(&self, categories: usize) -> CertaintyParams {
        CertaintyParams {
            categories,
            passes: self.passes,
            match_iou: self.match_iou,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Loads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fsutil::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.ground_truth].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_toml().as_bytes())
    }

    /// Applies `key=value` overrides using the same syntax as the file.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {v}"))
                .map(|mut t| t.remove("v").expect("parsed key"))
                .unwrap_or_else(|_| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
