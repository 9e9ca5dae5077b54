use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use lorentz_harness::config::{ExperimentConfig, Mode, OUTPUT_ROOT_ENV};
use lorentz_harness::output::sha256_hex;
use lorentz_harness::run::{LEDGER_HEADER, MANIFEST_FILE};
use lorentz_harness::{run, RunManifest};

fn limit_config(dir: &Path, workers: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Mode::Limit, 100, 7, dir);
    c.n_grid = vec![100, 1000];
    c.workers = workers;
    c
}

/// Every emitted file except the manifest, keyed by relative path.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                if rel != MANIFEST_FILE {
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
    }
    out
}

#[test]
fn limit_ledger_has_two_rows_per_metric_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&limit_config(&a, 1)).unwrap();
    run(&limit_config(&b, 1)).unwrap();
    let ledger = fs::read_to_string(a.join("ledger.csv")).unwrap();
    let mut lines = ledger.lines();
    assert_eq!(lines.next(), Some(LEDGER_HEADER));
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in lines {
        *counts.entry(l.split(',').next().unwrap()).or_default() += 1;
    }
    assert!(!counts.is_empty());
    assert!(counts.values().all(|&c| c == 2), "{counts:?}");
    assert_eq!(outputs(&a), outputs(&b));
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let one = tmp.path().join("w1");
    let eight = tmp.path().join("w8");
    let m1 = run(&limit_config(&one, 1)).unwrap();
    let m8 = run(&limit_config(&eight, 8)).unwrap();
    assert_eq!(m1.files, m8.files);
    assert_eq!(outputs(&one), outputs(&eight));

    let mut renewal = ExperimentConfig::new(Mode::Renewal, 64, 11, tmp.path().join("r1"));
    renewal.t_grid = vec![200.0];
    let r1 = run(&renewal).unwrap();
    renewal.workers = 8;
    renewal.output_dir = tmp.path().join("r8");
    let r8 = run(&renewal).unwrap();
    assert_eq!(r1.files, r8.files);
}

#[test]
fn manifest_hashes_match_the_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("m");
    let manifest = run(&limit_config(&dir, 2)).unwrap();
    let on_disk: RunManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk.files, manifest.files);
    assert_eq!(on_disk.config, manifest.config);
    assert_eq!(manifest.files.len(), 3);
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.path)).unwrap();
        assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.path);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    assert!(manifest.stages.iter().any(|s| s.stage == "replicas n=1000"));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["constants"]["xi_bar"], 0.5);
}

#[test]
fn seeds_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let mut other = limit_config(&tmp.path().join("b"), 1);
    other.seed = 8;
    run(&limit_config(&a, 1)).unwrap();
    run(&other).unwrap();
    assert_ne!(outputs(&a)["ledger.csv"], outputs(&tmp.path().join("b"))["ledger.csv"]);
}

#[test]
fn stein_check_writes_one_record_per_function() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("s");
    let mut c = ExperimentConfig::new(Mode::SteinCheck, 200, 5, &dir);
    c.n_grid = vec![1000];
    let manifest = run(&c).unwrap();
    let records: Vec<_> = manifest.files.iter().filter(|f| f.path.starts_with("stein/")).collect();
    assert_eq!(records.len(), 12);
    for f in records {
        let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(&f.path)).unwrap()).unwrap();
        let obj = v.as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        assert_eq!(keys, ["bound_checks", "function", "leading_error", "residuals"]);
        assert!(v["function"].is_string());
        assert!(v["bound_checks"]["df_ok"].is_boolean());
        assert!(v["residuals"]["max_residual"].as_f64().unwrap() < 1e-3);
        let lead = &v["leading_error"][0];
        assert_eq!(lead["n"], 1000);
        assert!(lead["estimate"]["mean"].is_number() && lead["direct_gap"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn billiard_mode_reports_the_mean_free_path() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::new(Mode::Billiard, 2, 3, tmp.path().join("b"));
    c.r = Some(0.01);
    c.flights = 20_000;
    let out = lorentz_harness::execute(&c).unwrap();
    let mfp = out.row("mean_free_path_ratio", 20_000.0).unwrap();
    assert!((mfp.value - 1.0).abs() < 0.1, "{mfp:?}");
    assert!(out.trajectories.starts_with("index,xi,"));
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lorentz"))
}

#[test]
fn cli_exit_codes_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("limit.toml");
    fs::write(
        &cfg,
        "schema_version = 1\nmode = \"limit\"\nn_grid = [100, 1000]\nreplicas = 100\nseed = 1\noutput_dir = \"from_file\"\n",
    )
    .unwrap();
    let status = cli()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "7", "--output-dir", "flagged"])
        .env(OUTPUT_ROOT_ENV, tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(!tmp.path().join("from_file").exists());
    // Same (config, seed) as the library run.
    let lib = tmp.path().join("lib");
    run(&limit_config(&lib, 1)).unwrap();
    assert_eq!(outputs(&tmp.path().join("flagged")), outputs(&lib));

    let bad = cli()
        .args(["limit", "--n-grid", "1000,100", "--replicas", "10", "--seed", "1"])
        .env(OUTPUT_ROOT_ENV, tmp.path())
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("n_grid"));

    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, b"x").unwrap();
    let io = cli()
        .args([
            "limit",
            "--n-grid",
            "100",
            "--replicas",
            "100",
            "--seed",
            "1",
            "--output-dir",
        ])
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(io.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&io.stderr).contains("blocker"));
}
