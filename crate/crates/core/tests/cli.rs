use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cras_core::config::ExperimentConfig;
use cras_core::io;
use cras_core::pipeline;
use cras_core::Stage;

fn small_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 5,
        "out_dir": dir.join("out"),
        "traffic": {
            "session_counts": [40, 30, 20, 30, 50, 60],
            "n_users": 25,
            "pool_size": [30, 60],
        },
        "caps": [50, 20, 8],
        "fixed_quotas": [30, 10, 4],
        "fit": { "n_noise_draws": 8, "max_requests_per_user": 3 },
        "compare": { "stage": "fine", "cost_levels": [1, 2, 3, 4, 6, 9] },
        "grid": {
            "caps": [[50, 20, 8], [40, 25, 6], [60, 10, 10], [400, 100, 40]],
            "baseline": [30, 10, 4],
        },
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn cras(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cras"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_all(config: &Path) {
    ok(cras(config, &["gen-traffic"]));
    ok(cras(config, &["fit", "--stage", "all"]));
    ok(cras(config, &["run", "--strategy", "cras"]));
    ok(cras(config, &["run", "--strategy", "baseline"]));
    ok(cras(config, &["compare"]));
    ok(cras(config, &["grid-search"]));
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn every_command_is_byte_identical_on_rerun() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_config(a.path());
    let cb = small_config(b.path());
    run_all(&ca);
    run_all(&cb);
    let sa = snapshot(&a.path().join("out"));
    let sb = snapshot(&b.path().join("out"));
    let names: Vec<&str> = sa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "traffic.jsonl",
        "models_pre.jsonl",
        "curves_fine.jsonl",
        "fit_report_coarse.csv",
        "sessions_cras.csv",
        "sessions_baseline.csv",
        "trace_fine.csv",
        "compare_fine.csv",
        "grid_search.csv",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert_eq!(sa.len(), sb.len());
    for ((na, da), (nb, db)) in sa.iter().zip(&sb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between reruns");
    }
}

#[test]
fn seed_changes_traffic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(cras(&cfg, &["gen-traffic"]));
    let first = fs::read(dir.path().join("out/traffic.jsonl")).unwrap();
    ok(cras(&cfg, &["--seed", "6", "gen-traffic"]));
    let second = fs::read(dir.path().join("out/traffic.jsonl")).unwrap();
    assert_ne!(first, second);
}

#[test]
fn fitted_models_round_trip_through_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_config(dir.path());
    ok(cras(&path, &["gen-traffic"]));
    ok(cras(&path, &["fit"]));
    let cfg = ExperimentConfig::load(Some(&path), &[]).unwrap();
    let requests = io::read_traffic(&cfg.traffic_path()).unwrap();
    for stage in Stage::ALL {
        let fresh = pipeline::fit_stage(&requests, stage, &cfg).unwrap();
        let stored = io::read_models(&cfg.models_path(stage)).unwrap();
        assert_eq!(fresh.models.len(), stored.len());
        for (a, b) in fresh.models.iter().zip(&stored) {
            assert_eq!(a.request_key, b.request_key);
            assert!((a.r_coeff - b.r_coeff).abs() <= 1e-12);
            assert!((a.b_offset - b.b_offset).abs() <= 1e-12);
        }
    }
}

#[test]
fn baseline_cost_is_fixed_quota_times_traffic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(cras(&cfg, &["gen-traffic"]));
    ok(cras(&cfg, &["run", "--strategy", "baseline"]));
    let csv = fs::read_to_string(dir.path().join("out/sessions_baseline.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let n_col = header.iter().position(|h| *h == "n_requests").unwrap();
    let fine_col = header.iter().position(|h| *h == "cost_fine").unwrap();
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let n: u64 = f[n_col].parse().unwrap();
        let cost: u64 = f[fine_col].parse().unwrap();
        assert_eq!(cost, 4 * n);
        rows += 1;
    }
    assert_eq!(rows, 6);
}

#[test]
fn grid_search_only_reports_feasible_triples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(cras(&cfg, &["gen-traffic"]));
    ok(cras(&cfg, &["fit"]));
    let stdout = ok(cras(&cfg, &["grid-search"]));
    assert!(!stdout.contains("400,100,40"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("out/grid_search.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "D1,D2,D3,revenue,increment_pct");
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());

    // traffic missing -> I/O error
    assert_eq!(cras(&cfg, &["fit"]).status.code(), Some(2));
    assert_eq!(
        cras(&dir.path().join("nope.json"), &["gen-traffic"]).status.code(),
        Some(2)
    );

    ok(cras(&cfg, &["gen-traffic"]));
    // models missing -> config error naming the file
    let out = cras(&cfg, &["run", "--strategy", "cras"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("models_pre.jsonl"));

    assert_eq!(cras(&cfg, &["fit", "--stage", "middle"]).status.code(), Some(1));
    assert_eq!(cras(&cfg, &["run", "--strategy", "greedy"]).status.code(), Some(1));
    assert_eq!(cras(&cfg, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cras(&cfg, &["--set", "control.kp=x", "run"]).status.code(), Some(1));
    assert_eq!(cras(&cfg, &["--help"]).status.code(), Some(0));

    ok(cras(&cfg, &["fit"]));
    // caps that break the deadline surface as violations
    let out = cras(&cfg, &["--set", "latency.deadline_ms=40", "run"]);
    assert_eq!(out.status.code(), Some(3));
    let out = cras(
        &cfg,
        &["--set", "grid.caps=[[400,100,40]]", "grid-search"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("deadline"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"seed\": 1, \"unknown_key\": true}").unwrap();
    let out = cras(&bad, &["gen-traffic"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
}

#[test]
fn compare_writes_every_level_within_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    ok(cras(&cfg, &["gen-traffic"]));
    ok(cras(&cfg, &["fit", "--stage", "fine"]));
    let out = cras(&cfg, &["--set", "compare.cost_levels=[2,4,99]", "compare"]);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let stdout = ok(out);
    assert!(stderr.contains("99"), "{stderr}");
    assert_eq!(stdout.lines().count(), 1 + 2);
}
