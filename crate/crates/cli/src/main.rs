use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use boxal::certainty::rank_pool;
use boxal::detection_io::{load_ground_truth, load_image_passes, load_manifest, PassesSchema};
use boxal::evaluation::{coco_map, load_predictions, ttest_two_sided};
use boxal::orchestrator::{
    init_simulated_run, simulator_adapter, DetectorAdapter, Run, RunConfig, SimulationConfig,
};
use boxal::sampling::{sample_min_certainty, sample_random, Strategy};
use boxal::{read_id_list, write_id_list};

/// Certainty-based active learning for object detection.
#[derive(Parser)]
#[command(name = "boxal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run directory from a manifest and a config file.
    Init(InitArgs),
    /// Run one active-learning iteration.
    Iterate(IterateArgs),
    /// Run several iterations, then evaluate the final model.
    Loop(LoopArgs),
    /// Rank images of a detections file by certainty (CSV on stdout).
    Rank(RankArgs),
    /// Select a batch from a ranking CSV or a pool list.
    Sample(SampleArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Two-sided unpaired Student's t-test on two CSV columns.
    Ttest(TtestArgs),
    /// Generate a synthetic world and run the loop on it.
    SimulateRun(SimulateArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ground truth for every manifest image. Overrides the config value.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Config override, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AdapterKind {
    /// Simulator if the run was made by `simulate-run`, else external.
    Auto,
    /// Wait for sentinel files written by another process.
    External,
    Simulator,
}

#[derive(Args)]
struct AdapterArgs {
    #[arg(long, value_enum, default_value = "auto")]
    adapter: AdapterKind,
}

#[derive(Args)]
struct IterateArgs {
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    adapter: AdapterArgs,
}

#[derive(Args)]
struct LoopArgs {
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the configured iteration count minus those already done.
    #[arg(long)]
    iterations: Option<usize>,
    #[command(flatten)]
    adapter: AdapterArgs,
}

#[derive(Args)]
struct RankArgs {
    /// Detections file (one image per line, all passes).
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of categories; inferred from the file when omitted.
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Ranking CSV with `image_id` and `c_min` columns (min-certainty).
    #[arg(long, conflicts_with = "pool")]
    ranking: Option<PathBuf>,
    /// Pool id list, one per line (random).
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    iteration: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Test,
    Validation,
    Pool,
    InitialTraining,
    All,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions file (one image per line with final predictions).
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0.5)]
    f1_iou: f64,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-image F1 CSV.
    #[arg(long)]
    per_image: Option<PathBuf>,
}

#[derive(Args)]
struct TtestArgs {
    /// CSV file with a header row.
    #[arg(long)]
    csv: PathBuf,
    /// First column name; defaults to the first column.
    #[arg(long)]
    x: Option<String>,
    /// Second column name; defaults to the second column.
    #[arg(long)]
    y: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Full simulation config (JSON); the flags below override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the synthetic world; defaults to `--seed`.
    #[arg(long)]
    world_seed: Option<u64>,
    /// Images available for annotation (initial training plus pool).
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    initial_training: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Run config override, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => init(a),
        Command::Iterate(a) => iterate(a),
        Command::Loop(a) => run_loop(a),
        Command::Rank(a) => rank(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ttest(a) => ttest(a),
        Command::SimulateRun(a) => simulate(a),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(overrides.iter().map(String::as_str))?)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| p.display().to_string())?),
        None => Box::new(io::stdout().lock()),
    })
}

fn init(a: InitArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), &a.overrides)?;
    cfg.manifest = Some(a.manifest);
    if a.ground_truth.is_some() {
        cfg.ground_truth = a.ground_truth;
    }
    let run = Run::init(&a.out, &cfg)?;
    let s = run.state();
    println!(
        "initialized {}: {} training, {} pool",
        a.out.display(),
        s.training.len(),
        s.pool.len()
    );
    Ok(())
}

fn adapter_for(run: &Run, kind: AdapterKind) -> Result<Box<dyn DetectorAdapter>> {
    let simulated = run.dir().join("simulation.json").exists();
    Ok(match kind {
        AdapterKind::Simulator => Box::new(simulator_adapter(run.dir())?),
        AdapterKind::Auto if simulated => Box::new(simulator_adapter(run.dir())?),
        _ => Box::new(run.external_adapter()),
    })
}

fn iterate(a: IterateArgs) -> Result<()> {
    let mut run = Run::open(&a.run)?;
    let mut adapter = adapter_for(&run, a.adapter.adapter)?;
    let r = run.run_iteration(adapter.as_mut())?;
    println!(
        "iteration {}: sampled {}, mAP {}",
        r.iteration,
        r.sampled.len(),
        r.map.map_or("n/a".to_string(), |m| format!("{m:.4}"))
    );
    Ok(())
}

fn run_loop(a: LoopArgs) -> Result<()> {
    let mut run = Run::open(&a.run)?;
    let iterations = a
        .iterations
        .unwrap_or_else(|| run.config().iterations.saturating_sub(run.state().iteration));
    let mut adapter = adapter_for(&run, a.adapter.adapter)?;
    let state = run.run_loop(adapter.as_mut(), iterations)?;
    println!(
        "finished at iteration {}: {} training, {} pool",
        state.iteration,
        state.training.len(),
        state.pool.len()
    );
    Ok(())
}

fn rank(a: RankArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), &a.overrides)?;
    let schema = PassesSchema {
        passes: Some(cfg.passes),
        categories: a.categories,
    };
    let images = load_image_passes(&a.detections, &schema)?;
    let categories = match a.categories {
        Some(k) => k,
        None => images
            .iter()
            .flat_map(|i| i.passes.iter().flatten())
            .map(|d| d.scores.len())
            .next()
            .context("cannot infer the category count from a file without detections; pass --categories")?,
    };
    let thresholds = cfg.thresholds();
    let images: Vec<_> = images
        .iter()
        .map(|i| boxal::detection_io::apply_thresholds(i, &thresholds))
        .collect();
    let ranking = rank_pool(&images, &cfg.certainty_params(categories))?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(["image_id", "c_min", "set_count", "min_c_sem", "min_c_spa", "min_c_occ"])?;
    for r in &ranking {
        let m = r.component_minima();
        w.write_record([
            r.image_id.clone(),
            r.c_min.to_string(),
            r.set_count().to_string(),
            m.semantic.to_string(),
            m.spatial.to_string(),
            m.occurrence.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ids = match (&a.ranking, &a.pool) {
        (Some(path), None) => {
            let mut rdr = csv::Reader::from_path(path)?;
            let headers = rdr.headers()?.clone();
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .with_context(|| format!("ranking has no `{name}` column"))
            };
            let (id_col, c_col) = (col("image_id")?, col("c_min")?);
            let mut ranking = Vec::new();
            for rec in rdr.records() {
                let rec = rec?;
                let c: f64 = rec[c_col].parse().with_context(|| format!("bad c_min `{}`", &rec[c_col]))?;
                ranking.push((rec[id_col].to_string(), c));
            }
            ranking.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
            sample_min_certainty(&ranking, a.batch_size)?
        }
        (None, Some(path)) => sample_random(&read_id_list(path)?, a.batch_size, a.seed, a.iteration)?,
        _ => bail!("pass exactly one of --ranking or --pool"),
    };
    match &a.out {
        Some(p) => write_id_list(p, &ids)?,
        None => {
            let mut out = io::stdout().lock();
            for id in ids {
                writeln!(out, "{id}")?;
            }
        }
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let k = manifest.categories.len();
    let gt = load_ground_truth(&a.ground_truth, k)?;
    let preds = load_predictions(&a.predictions, k)?;
    let ids: Vec<&String> = match a.split {
        Split::Test => manifest.test.iter().collect(),
        Split::Validation => manifest.validation.iter().collect(),
        Split::Pool => manifest.pool.iter().collect(),
        Split::InitialTraining => manifest.initial_training.iter().collect(),
        Split::All => manifest.all_ids().collect(),
    };
    let mut subset = boxal::detection_io::GroundTruth::new();
    for id in ids {
        let g = gt
            .get(id)
            .with_context(|| format!("image `{id}` has no ground truth"))?;
        subset.insert(id.clone(), g.clone());
    }
    let result = coco_map(&preds, &subset, k, a.f1_iou)?;
    let per_category: serde_json::Map<String, serde_json::Value> = manifest
        .categories
        .names()
        .iter()
        .zip(&result.per_category_ap)
        .map(|(name, ap)| (name.clone(), serde_json::json!(ap)))
        .collect();
    let report = serde_json::json!({
        "map": result.map,
        "per_category_ap": per_category,
        "images": subset.len(),
        "tp": result.tp,
        "fp": result.fp,
        "fn": result.fn_,
        "mean_f1": result.mean_f1(),
    });
    let mut out = output(a.report.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    writeln!(out)?;
    if let Some(path) = &a.per_image {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "tp", "fp", "fn", "f1"])?;
        for (id, s) in &result.per_image_f1 {
            w.write_record([
                id.clone(),
                s.tp.to_string(),
                s.fp.to_string(),
                s.fn_.to_string(),
                s.f1.to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(())
}

fn ttest(a: TtestArgs) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(&a.csv)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &Option<String>, default: usize| -> Result<usize> {
        match name {
            Some(n) => headers
                .iter()
                .position(|h| h == n)
                .with_context(|| format!("no column `{n}`")),
            None if default < headers.len() => Ok(default),
            None => bail!("the CSV needs at least two columns"),
        }
    };
    let (xi, yi) = (col(&a.x, 0)?, col(&a.y, 1)?);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        for (i, v) in [(xi, &mut x), (yi, &mut y)] {
            // columns may differ in length; blank cells are skipped
            let cell = rec.get(i).unwrap_or("").trim();
            if !cell.is_empty() {
                v.push(cell.parse::<f64>().with_context(|| format!("bad value `{cell}`"))?);
            }
        }
    }
    let r = ttest_two_sided(&x, &y)?;
    println!("{}", serde_json::to_string(&r)?);
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: SimulationConfig = match &a.params {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| p.display().to_string())?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => SimulationConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if a.world_seed.is_some() {
        cfg.world_seed = a.world_seed;
    }
    if let Some(v) = a.images {
        cfg.images = v;
    }
    if let Some(v) = a.categories {
        cfg.categories = v;
    }
    if let Some(v) = a.initial_training {
        cfg.world.initial_training = v;
    }
    if let Some(v) = a.iterations {
        cfg.run.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.run.batch_size = v;
    }
    if let Some(v) = a.strategy {
        cfg.run.strategy = v;
    }
    cfg.run = cfg.run.with_overrides(a.overrides.iter().map(String::as_str))?;

    let mut run = init_simulated_run(&cfg, &a.out)?;
    let mut adapter = simulator_adapter(&a.out)?;
    let state = run.run_loop(&mut adapter, cfg.run.iterations)?;
    let last = state.rows().last().expect("final evaluation row");
    println!(
        "{} iterations, {} training images, final mAP {}",
        state.iteration,
        last.training_size,
        last.map.map_or("n/a".to_string(), |m| format!("{m:.4}"))
    );
    Ok(())
}
