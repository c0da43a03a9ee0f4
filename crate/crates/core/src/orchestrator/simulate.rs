use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActiveLearningState, Run, RunConfig, SimulatorAdapter};
use crate::detection_io::{save_ground_truth, save_manifest};
use crate::error::Result;
use crate::fsutil;
use crate::simulator::{generate_world, DetectorParams, SyntheticWorld, WorldParams};

/// Everything a fully synthetic run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    /// Seeds the detector passes and the random sampler.
    pub seed: u64,
    /// Seeds the world; defaults to `seed`. Keep it fixed to compare runs on
    /// the same data.
    pub world_seed: Option<u64>,
    /// Images available for annotation: initial training set plus pool.
    /// The validation and test images of `world` are generated on top.
    pub images: usize,
    pub categories: usize,
    pub world: WorldParams,
    pub detector: DetectorParams,
    /// Loop settings. `seed`, `manifest` and `ground_truth` are filled in.
    pub run: RunConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            seed: 0,
            world_seed: None,
            images: 500,
            categories: 10,
            world: WorldParams::default(),
            detector: DetectorParams::default(),
            run: RunConfig {
                batch_size: 50,
                iterations: 8,
                ..RunConfig::default()
            },
        }
    }
}

impl SimulationConfig {
    pub fn total_images(&self) -> usize {
        self.images + self.world.validation + self.world.test
    }

    pub fn pass_seed(&self) -> u64 {
        self.seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x243F_6A88_85A3_08D3
    }
}

/// Generates a world into `out` (`simulation.json`, `world.json`,
/// `manifest.json`, `ground_truth.jsonl`), initializes a run there and runs
/// `cfg.run.iterations` iterations plus the final evaluation.
pub fn simulate_run(cfg: &SimulationConfig, out: &Path) -> Result<ActiveLearningState> {
    let mut run = init_simulated_run(cfg, out)?;
    let mut adapter = simulator_adapter(out)?;
    run.run_loop(&mut adapter, cfg.run.iterations)?;
    Ok(run.state().clone())
}

/// Writes the world files and initializes the run without iterating.
pub fn init_simulated_run(cfg: &SimulationConfig, out: &Path) -> Result<Run> {
    let world = generate_world(
        cfg.world_seed.unwrap_or(cfg.seed),
        cfg.total_images(),
        cfg.categories,
        &cfg.world,
    )?;
    write_json(&out.join("simulation.json"), cfg, true)?;
    write_json(&out.join("world.json"), &world, false)?;
    save_manifest(&out.join("manifest.json"), &world.manifest)?;
    save_ground_truth(&out.join("ground_truth.jsonl"), &world.ground_truth())?;

    let mut run_cfg = cfg.run.clone();
    run_cfg.seed = cfg.seed;
    run_cfg.manifest = Some(out.join("manifest.json"));
    run_cfg.ground_truth = Some(out.join("ground_truth.jsonl"));
    Run::init(out, &run_cfg)
}

/// Rebuilds the in-process detector of a directory made by
/// [`simulate_run`] or [`init_simulated_run`].
pub fn simulator_adapter(dir: &Path) -> Result<SimulatorAdapter> {
    let cfg: SimulationConfig =
        serde_json::from_str(&fsutil::read_to_string(&dir.join("simulation.json"))?)?;
    let world: SyntheticWorld =
        serde_json::from_str(&fsutil::read_to_string(&dir.join("world.json"))?)?;
    let run = RunConfig::load(&dir.join("config.toml"))?;
    Ok(
        SimulatorAdapter::new(world, cfg.detector.clone(), cfg.pass_seed(), run.thresholds())
            .write_detections(run.keep_detections),
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let mut bytes = if pretty {
        serde_json::to_vec_pretty(value)?
    } else {
        serde_json::to_vec(value)?
    };
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}
