use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn supremal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supremal")).current_dir(dir).args(args).output().unwrap()
}

fn config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn events(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stderr).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn jensen_passes_with_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = supremal(dir.path(), &["jensen", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["outcome"], "pass");
    assert_eq!(report["result"]["passed"], 1000);
    assert_eq!(report["result"]["control"]["lhs"], 1.0);
    let ev = events(&out);
    assert_eq!(ev.first().unwrap()["event"], "start");
    assert_eq!(ev.last().unwrap()["outcome"], "pass");
}

#[test]
fn false_convexity_claim_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", r#"{"hamiltonian": "annulus", "claimed_level_convex": true, "convexity": {"segments": 100}}"#);
    let out = supremal(dir.path(), &["--config", &cfg, "convexity-check"]);
    assert_eq!(out.status.code(), Some(1));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["result"]["verdict"]["status"], "fail");
}

#[test]
fn rounding_band_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.json", r#"{"hamiltonian": "annulus", "convexity": {"segments": 100}}"#);
    let out = supremal(dir.path(), &["--config", &cfg, "--tol", "0.1", "convexity-check"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(events(&out).iter().any(|e| e["event"] == "warning"));
}

#[test]
fn config_errors_exit_64() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = config(dir.path(), "a.json", "{\n  \"seed\": 1,\n  \"trials\": ]\n}");
    let out = supremal(dir.path(), &["--config", &bad_json, "jensen"]);
    assert_eq!(out.status.code(), Some(64));
    let ev = events(&out);
    assert_eq!(ev[0]["kind"], "config");
    assert!(ev[0]["message"].as_str().unwrap().contains("line 3"));

    let unknown = config(dir.path(), "b.json", r#"{"sead": 1}"#);
    assert_eq!(supremal(dir.path(), &["--config", &unknown, "jensen"]).status.code(), Some(64));

    let syntax = config(dir.path(), "c.json", r#"{"hamiltonian": "norm(P) + * 2"}"#);
    let out = supremal(dir.path(), &["--config", &syntax, "jensen"]);
    assert_eq!(out.status.code(), Some(64));
    let err = events(&out).pop().unwrap();
    assert_eq!(err["event"], "error");
    assert_eq!((err["line"].as_u64(), err["column"].as_u64()), (Some(1), Some(11)));

    assert_eq!(supremal(dir.path(), &["no-such-check"]).status.code(), Some(64));
    assert_eq!(supremal(dir.path(), &["gallery", "--name", "nope"]).status.code(), Some(64));
    assert_eq!(supremal(dir.path(), &["--grid-h", "-1", "residual"]).status.code(), Some(64));
}

#[test]
fn out_dir_holds_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "m.json", r#"{"trials": 4, "seed": 9}"#);
    let out = supremal(dir.path(), &["--config", &cfg, "--out", "res", "check-minimality"]);
    assert_eq!(out.status.code(), Some(0));
    let json = fs::read(dir.path().join("res/minimality.json")).unwrap();
    assert_eq!(String::from_utf8(json).unwrap().trim_end(), String::from_utf8_lossy(&out.stdout).trim_end());
    let csv = fs::read_to_string(dir.path().join("res/margins.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "trial,margin,tol");
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "m.json", r#"{"trials": 6}"#);
    let a = supremal(dir.path(), &["--config", &cfg, "--seed", "11", "check-minimality"]);
    let b = supremal(dir.path(), &["--config", &cfg, "--seed", "11", "check-minimality"]);
    let c = supremal(dir.path(), &["--config", &cfg, "--seed", "12", "check-minimality"]);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn grid_h_rescales_the_residual_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = supremal(dir.path(), &["--grid-h", "0.2", "--out", ".", "residual"]);
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let hs: Vec<f64> = report["config"]["residual"]["h"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(hs, vec![0.2, 0.1, 0.05]);
    let sweep = fs::read_to_string(dir.path().join("residual_sweep.csv")).unwrap();
    assert!(sweep.lines().any(|l| l.starts_with("# fitted_order,")));
}

#[test]
fn gallery_lists_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = supremal(dir.path(), &["gallery"]);
    assert_eq!(out.status.code(), Some(0));
    let list: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(list.as_array().unwrap().iter().any(|e| e["name"] == "complex-exp"));

    let out = supremal(dir.path(), &["--grid-h", "0.5", "gallery", "--name", "cone"]);
    assert_eq!(out.status.code(), Some(0));
    let path = events(&out)[0]["path"].as_str().unwrap().to_string();
    let csv = fs::read_to_string(dir.path().join(path)).unwrap();
    // 5 × 5 grid plus a header or more.
    assert!(csv.lines().count() >= 26);
}
