use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use boxal::detection_io::{save_ground_truth, save_manifest, PassesSchema, Thresholds};
use boxal::evaluation::{save_predictions, FinalPrediction, Predictions};
use boxal::orchestrator::{AdapterRequest, DetectorAdapter, SimulatorAdapter, write_sentinel};
use boxal::simulator::{generate_world, DetectorParams, SyntheticWorld, WorldParams};
use tempfile::TempDir;

fn boxal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = boxal(args);
    assert!(
        out.status.success(),
        "boxal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_run_log_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let common = ["--seed", "9", "--images", "200", "--categories", "5", "--iterations", "3"];
    ok(&[&["simulate-run", "--out", s(&a)][..], &common].concat());
    ok(&[&["simulate-run", "--out", s(&b)][..], &common].concat());
    let la = fs::read(a.join("log.csv")).unwrap();
    assert_eq!(la, fs::read(b.join("log.csv")).unwrap());
    assert_eq!(String::from_utf8(la).unwrap().lines().count(), 5);
    // different seed, different log
    let c = tmp.path().join("c");
    ok(&["simulate-run", "--out", s(&c), "--seed", "10", "--images", "200", "--categories", "5", "--iterations", "3"]);
    assert_ne!(fs::read(a.join("log.csv")).unwrap(), fs::read(c.join("log.csv")).unwrap());
}

#[test]
fn simulated_run_resumes_through_iterate_and_loop() {
    let tmp = TempDir::new().unwrap();
    let (whole, split) = (tmp.path().join("whole"), tmp.path().join("split"));
    let common = ["--seed", "4", "--images", "150", "--categories", "4", "--batch-size", "30"];
    ok(&[&["simulate-run", "--out", s(&whole), "--iterations", "3"][..], &common].concat());
    ok(&[&["simulate-run", "--out", s(&split), "--iterations", "1"][..], &common].concat());
    ok(&["iterate", "--run", s(&split)]);
    ok(&["loop", "--run", s(&split), "--iterations", "1"]);
    assert_eq!(
        fs::read_to_string(whole.join("log.csv")).unwrap(),
        fs::read_to_string(split.join("log.csv")).unwrap()
    );
}

fn world_on_disk(dir: &Path) -> (SyntheticWorld, PathBuf, PathBuf) {
    let params = WorldParams {
        objects_per_image: (1, 3),
        ..WorldParams::default()
    };
    let world = generate_world(21, 160, 3, &params).unwrap();
    let (m, g) = (dir.join("manifest.json"), dir.join("gt.jsonl"));
    save_manifest(&m, &world.manifest).unwrap();
    save_ground_truth(&g, &world.ground_truth()).unwrap();
    (world, m, g)
}

/// Answers request documents the way an external trainer would.
fn serve(run: &Path, adapter: &mut SimulatorAdapter, fail_train: Option<usize>, until: impl Fn() -> bool) {
    let requests = run.join("requests");
    let schema = PassesSchema::default();
    let deadline = Instant::now() + Duration::from_secs(120);
    while !until() {
        assert!(Instant::now() < deadline, "protocol stalled");
        let mut pending = Vec::new();
        if let Ok(entries) = fs::read_dir(&requests) {
            for e in entries.flatten() {
                let p = e.path();
                if p.extension().is_some_and(|x| x == "json") {
                    if let Ok(req) = serde_json::from_str::<AdapterRequest>(&fs::read_to_string(&p).unwrap_or_default()) {
                        if !req.sentinel().exists() {
                            pending.push(req);
                        }
                    }
                }
            }
        }
        for req in pending {
            match req {
                AdapterRequest::Train(t) if Some(t.iteration) == fail_train => {
                    write_sentinel(&t.sentinel, Err("out of memory")).unwrap();
                }
                AdapterRequest::Train(t) => adapter.train(&t).unwrap(),
                AdapterRequest::Predict(p) => {
                    adapter.predict(&p, &schema).unwrap();
                }
            }
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn external_adapter_file_protocol() {
    let tmp = TempDir::new().unwrap();
    let (world, manifest, gt) = world_on_disk(tmp.path());
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "passes = 5\nbatch_size = 20\nadapter_poll_ms = 10\nadapter_timeout_secs = 60\n").unwrap();
    ok(&["init", "--manifest", s(&manifest), "--ground-truth", s(&gt), "--config", s(&cfg), "--out", s(&run)]);
    assert!(run.join("state/iter_0.json").exists());

    let mut adapter = SimulatorAdapter::new(world, DetectorParams::default(), 3, Thresholds::default());

    // the trainer fails the retrain of iteration 2: the iteration aborts
    let child = Command::new(env!("CARGO_BIN_EXE_boxal"))
        .args(["loop", "--run", s(&run), "--iterations", "2", "--adapter", "external"])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let child = std::sync::Mutex::new(child);
    let exited = || child.lock().unwrap().try_wait().unwrap().is_some();
    serve(&run, &mut adapter, Some(2), exited);
    let status = child.lock().unwrap().wait().unwrap();
    assert!(!status.success());
    assert!(!run.join("state/iter_2.json").exists());
    assert!(run.join("state/iter_1.json").exists());
    assert!(!run.join("lock").exists());

    // resume with a healthy trainer
    let child = Command::new(env!("CARGO_BIN_EXE_boxal"))
        .args(["loop", "--run", s(&run), "--iterations", "1", "--adapter", "external"])
        .spawn()
        .unwrap();
    let child = std::sync::Mutex::new(child);
    let exited = || child.lock().unwrap().try_wait().unwrap().is_some();
    serve(&run, &mut adapter, None, exited);
    assert!(child.lock().unwrap().wait().unwrap().success());

    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    let sizes: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(sizes, ["20", "40", "60"]);
    assert_eq!(fs::read_to_string(run.join("trainset_iter2.txt")).unwrap().lines().count(), 60);
}

#[test]
fn evaluate_perfect_predictions() {
    let tmp = TempDir::new().unwrap();
    let (world, manifest, gt) = world_on_disk(tmp.path());
    let preds: Predictions = world
        .images
        .iter()
        .map(|im| {
            let p = im
                .objects
                .iter()
                .map(|o| FinalPrediction { bbox: o.bbox, category: o.category, score: 1.0 })
                .collect();
            (im.image_id.clone(), p)
        })
        .collect();
    let pred_path = tmp.path().join("preds.jsonl");
    save_predictions(&pred_path, &preds).unwrap();
    let per_image = tmp.path().join("f1.csv");
    let out = ok(&[
        "evaluate", "--predictions", s(&pred_path), "--ground-truth", s(&gt),
        "--manifest", s(&manifest), "--per-image", s(&per_image),
    ]);
    let report: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(report["map"], 1.0);
    assert_eq!(report["fp"], 0);
    assert_eq!(report["images"], 50);
    let rows = fs::read_to_string(&per_image).unwrap();
    assert_eq!(rows.lines().count(), 51);
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",1")));
}

#[test]
fn ttest_on_csv_columns() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("f1.csv");
    fs::write(&csv, "a,b\n1,2\n2,3\n3,4\n4,5\n5,6\n").unwrap();
    let r: serde_json::Value = serde_json::from_str(&ok(&["ttest", "--csv", s(&csv)])).unwrap();
    assert!((r["t"].as_f64().unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(r["df"], 8);
    assert!((r["p"].as_f64().unwrap() - 0.3466).abs() < 1e-4);
    let swapped: serde_json::Value =
        serde_json::from_str(&ok(&["ttest", "--csv", s(&csv), "--x", "b", "--y", "a"])).unwrap();
    assert_eq!(swapped["p"], r["p"]);

    fs::write(&csv, "sampled,remaining\n0,1\n0,1\n,1\n").unwrap();
    let r: serde_json::Value = serde_json::from_str(&ok(&["ttest", "--csv", s(&csv)])).unwrap();
    assert_eq!((r["t"].as_str(), r["p"].as_f64()), (Some("-inf"), Some(0.0)));
}

#[test]
fn sample_from_pool_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let pool = tmp.path().join("pool.txt");
    let ids: String = (0..30).map(|i| format!("im{i:02}\n")).collect();
    fs::write(&pool, ids).unwrap();
    let args = ["sample", "--pool", s(&pool), "--batch-size", "5", "--seed", "3", "--iteration", "2"];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    assert_eq!(a.lines().count(), 5);
    assert!(!boxal(&["sample", "--pool", s(&pool), "--batch-size", "31"]).status.success());
}

#[test]
fn bad_manifest_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let m = tmp.path().join("m.json");
    fs::write(
        &m,
        r#"{"categories":["a","b"],"initial_training":["x"],"pool":["x"],"validation":[],"test":[]}"#,
    )
    .unwrap();
    let g = tmp.path().join("g.jsonl");
    fs::write(&g, "").unwrap();
    let out = boxal(&["init", "--manifest", s(&m), "--ground-truth", s(&g), "--out", s(&tmp.path().join("r"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("both"));
}
