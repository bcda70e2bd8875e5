// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

fn gshare(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gshare"))
        .args(args)
        .env("GSHARE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn profile_check_reports_clean_profile() {
    let out = gshare(&["profile-check", s(&fixture("resnet_profile.csv"))]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("resnet: 35 points, 0 warnings"), "{text}");
    assert!(text.contains("grid coverage: 35/35"));
}

#[test]
fn profile_check_lists_warnings_without_failing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dip.csv");
    fs::write(
        &path,
        "function_id,sm_partition,quota,throughput_rps,p99_ms,slo_ms,mem_noshare_mb,mem_runtime_mb,mem_server_mb\n\
         f,24,0.2,10,50,100,1000,800,500\n\
         f,24,0.4,8,50,100,1000,800,500\n",
    )
    .unwrap();
    let out = gshare(&["profile-check", s(&path)]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("1 warnings"), "{text}");
    assert!(text.contains("warning:"));
}

#[test]
fn profile_check_missing_file_fails() {
    let out = gshare(&["profile-check", "/nonexistent/profile.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_steady_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = gshare(&["run", "--scenario", s(&fixture("steady.json")), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("SLO violations 0.0%"));
    }
    let csv_a = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("metrics.csv")).unwrap());
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["violation_pct"], 0.0);
}

#[test]
fn run_seed_and_policy_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = gshare(&[
        "run",
        "--scenario",
        s(&fixture("consolidation.json")),
        "--out",
        s(dir.path()),
        "--seed",
        "99",
        "--policy",
        "timeshare",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let summary: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 99);
    assert_eq!(summary["policy"], "timeshare");
    assert_eq!(summary["peak_gpus_in_use"], 4);
}

#[test]
fn run_rejects_invalid_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, r#"{"version": 1, "fleet_size": 0, "windows": 5, "functions": []}"#).unwrap();
    let o = gshare(&["run", "--scenario", s(&path), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fleet_size"));
}

#[test]
fn run_verbose_dumps_backend_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = gshare(&["run", "--scenario", s(&fixture("steady.json")), "--out", s(dir.path()), "--verbose"]);
    assert_eq!(o.status.code(), Some(0));
    let dump = fs::read_to_string(dir.path().join("backend.jsonl")).unwrap();
    let first: Value = serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    assert_eq!(first["gpu_id"], 0);
    assert!(first["snapshot"]["pods"].is_array());
}

#[test]
fn run_many_in_parallel_writes_per_scenario_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let o = gshare(&[
        "run",
        "--scenario",
        s(&fixture("steady.json")),
        "--scenario",
        s(&fixture("step.json")),
        "--out",
        s(dir.path()),
        "--parallel",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("steady/metrics.csv").exists());
    assert!(dir.path().join("step/summary.json").exists());
}

#[test]
fn compare_reports_both_policies() {
    let dir = tempfile::tempdir().unwrap();
    let o = gshare(&["compare", "--scenario", s(&fixture("consolidation.json")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let rows: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("comparison.json")).unwrap()).unwrap();
    assert_eq!(rows[0]["policy"], "fast");
    assert_eq!(rows[0]["gpus_used"], 1);
    assert_eq!(rows[1]["gpus_used"], 4);
    assert!(rows[0]["mean_utilization"].as_f64() > rows[1]["mean_utilization"].as_f64());
}

fn trace(events: &str) -> (Output, Vec<Value>) {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("events.jsonl");
    fs::write(&input, events).unwrap();
    let output = dir.path().join("trace.jsonl");
    let o = gshare(&["pack-trace", "--events", s(&input), "--out", s(&output)]);
    let steps = fs::read_to_string(&output)
        .unwrap_or_default()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    (o, steps)
}

fn rects(step: &Value) -> Vec<[u64; 4]> {
    let mut v: Vec<[u64; 4]> = step["free_rects"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| ["x", "y", "w", "h"].map(|k| r[k].as_u64().unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn pack_trace_two_placements() {
    let (o, steps) = trace(
        "{\"op\":\"place\",\"pod\":\"a\",\"w\":40,\"h\":30}\n{\"op\":\"place\",\"pod\":\"b\",\"w\":60,\"h\":50}\n",
    );
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(steps.len(), 3);
    assert_eq!(rects(&steps[1]), vec![[0, 30, 100, 70], [40, 0, 60, 100]]);
    assert_eq!(rects(&steps[2]), vec![[0, 30, 40, 70], [0, 50, 100, 50]]);
    assert!(steps.iter().all(|s| s["oracle"].as_array().unwrap().is_empty()));
}

#[test]
fn pack_trace_empty_and_bad_release() {
    let (o, steps) = trace("");
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(steps.len(), 1);
    assert_eq!(rects(&steps[0]), vec![[0, 0, 100, 100]]);

    let (o, steps) = trace("{\"op\":\"release\",\"pod\":\"ghost\"}\n{\"op\":\"place\",\"pod\":\"a\",\"w\":10,\"h\":10}\n");
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(steps[1]["ok"], false);
    assert!(steps[1]["error"].as_str().unwrap().contains("ghost"));
    assert_eq!(steps[2]["ok"], true);
}
