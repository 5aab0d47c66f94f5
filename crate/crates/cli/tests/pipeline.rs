use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use canopy_fewshot::dataset::write_manifest;
use canopy_fewshot::nn::TowerSpec;
use canopy_fewshot::synthetic::{generate, SyntheticSpec};
use serde_json::{json, Value};

fn canopy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canopy"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Writes a small raw dataset (24 px tiles) and a config pointing at it.
fn setup(dir: &Path) -> PathBuf {
    let spec = SyntheticSpec {
        tile_size: 24,
        base_per_class: 4,
        heldout_per_class: 1,
        unseen_per_class: 4,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let raw = dir.join("raw");
    write_manifest(&generate(&spec).unwrap(), &raw).unwrap();
    let train = json!({ "epochs": 1, "batch_size": 16, "learning_rate": 0.001, "seed": 0 });
    let config = json!({
        "seed": 11,
        "paths": { "raw_manifest": raw.join("manifest.json"), "out": dir.join("runs") },
        "normalization": { "tile_size": 32 },
        "tower_spec": TowerSpec::shallow_cnn_compact(),
        "pairing": { "cap": 4, "variants": 2, "n_per_side": 60 },
        "training": train,
        "refinement": train,
        "fewshot": { "shots": [1, 2], "k": 2, "n_folds": 2, "pool_cap": 4 },
    });
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn run_ok(config: &Path, args: &[&str]) {
    let mut full = vec!["--config", config.to_str().unwrap()];
    full.extend_from_slice(args);
    let out = canopy(&full);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    for verb in ["prepare", "pairs", "train"] {
        run_ok(&config, &[verb]);
    }
    run_ok(&config, &["refine", "--fold", "1"]);
    run_ok(&config, &["classify", "--fold", "1"]);
    run_ok(&config, &["classify", "--fold", "1", "--arm", "zero-shot", "--method", "knn"]);
    run_ok(&config, &["explain", "--fold", "1"]);
    run_ok(&config, &["sweep"]);

    let runs = dir.path().join("runs");
    let actions = fs::read_to_string(runs.join("prepare/actions.jsonl")).unwrap();
    let first: Value = serde_json::from_str(actions.lines().next().unwrap()).unwrap();
    assert_eq!((first["left"].as_i64(), first["right"].as_i64()), (Some(4), Some(4)));

    // 5 classes × 4 tiles × 3 versions: 5·C(12,2) similar, C(60,2) − that dissimilar.
    let header = read(&runs.join("pairs/header.json"));
    assert_eq!(header["enumerated_similar"], 330);
    assert_eq!(header["enumerated_dissimilar"], 1440);
    assert_eq!(header["similar"], 60);

    let predictions = fs::read_to_string(runs.join("classify_k2_f1_refined/predictions.jsonl")).unwrap();
    assert_eq!(predictions.lines().count(), 3 * 2);
    let knn = read(&runs.join("classify_k2_f1_zero-shot/context.json"));
    assert_eq!((knn["method"].as_str(), knn["knn_k"].as_u64()), (Some("knn"), Some(2)));

    let metrics = read(&runs.join("explain_k2_f1_refined/metrics.json"));
    assert_eq!(metrics["k"], 2);
    assert!(metrics["c_cst"].is_number());
    assert!(runs.join("explain_k2_f1_refined/report/index.html").exists());

    let table = read(&runs.join("sweep/table.json"));
    assert_eq!(table.as_array().unwrap().len(), 4);
    assert!(runs.join("sweep/sweep_k1.json").exists());
    assert!(fs::read_to_string(runs.join("sweep/table.md")).unwrap().contains("| 2 | refined |"));

    for stage in ["prepare", "pairs", "train", "refine_k2_f1", "sweep"] {
        let sidecar = read(&runs.join(stage).join("stage.json"));
        assert_eq!(sidecar["fingerprint"].as_str().map(str::len), Some(64), "{stage}");
    }
    assert!(!runs.join(".lock").exists());
}

#[test]
fn existing_stage_is_refused_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    run_ok(&config, &["prepare"]);
    let again = canopy(&["--config", config.to_str().unwrap(), "prepare"]);
    assert_eq!(code(&again), 3);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    run_ok(&config, &["--force", "prepare"]);
}

#[test]
fn bad_image_path_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let manifest = dir.path().join("raw/manifest.json");
    let mut m = read(&manifest);
    m["tiles"][0]["path"] = json!("tiles/nowhere.png");
    fs::write(&manifest, m.to_string()).unwrap();
    let out = canopy(&["--config", config.to_str().unwrap(), "prepare"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.png"));
}

#[test]
fn missing_upstream_names_the_expected_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let out = canopy(&["--config", config.to_str().unwrap(), "train"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pairs.jsonl") && err.contains("`pairs`"), "{err}");
}

#[test]
fn locked_output_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    fs::create_dir_all(dir.path().join("runs")).unwrap();
    fs::write(dir.path().join("runs/.lock"), "1").unwrap();
    let out = canopy(&["--config", config.to_str().unwrap(), "prepare"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn same_seed_same_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path());
    let mut weights = Vec::new();
    for out in ["a", "b"] {
        let root = dir.path().join(out);
        let root = root.to_str().unwrap();
        for verb in ["prepare", "pairs", "train"] {
            run_ok(&config, &["--out", root, verb]);
        }
        run_ok(&config, &["--out", root, "classify", "--arm", "zero-shot"]);
        let sidecar = read(&Path::new(root).join("train/stage.json"));
        let predictions = fs::read_to_string(Path::new(root).join("classify_k2_f0_zero-shot/predictions.jsonl")).unwrap();
        weights.push((sidecar["outputs"]["weights"].clone(), predictions));
    }
    assert_eq!(weights[0], weights[1]);

    // A different seed changes the sampled pairs.
    let other = dir.path().join("c");
    let other = other.to_str().unwrap();
    for verb in ["prepare", "pairs"] {
        run_ok(&config, &["--seed", "12", "--out", other, verb]);
    }
    let a = fs::read_to_string(dir.path().join("a/pairs/pairs.jsonl")).unwrap();
    let c2 = fs::read_to_string(Path::new(other).join("pairs/pairs.jsonl")).unwrap();
    assert_ne!(a, c2);
}

#[test]
fn quick_synthetic_is_flagged_non_acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = canopy(&["--out", out.to_str().unwrap(), "--quick", "synthetic"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL  acceptance_grade"), "{stdout}");
    let report = read(&out.join("synthetic/report.json"));
    assert_eq!(report["acceptance_grade"], false);
    assert_eq!(report["sweeps"].as_array().unwrap().len(), 3);
    assert!(out.join("synthetic/report/index.html").exists());
}
