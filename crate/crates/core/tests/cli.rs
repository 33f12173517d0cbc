use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fgamma(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgamma"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn num(v: &Value) -> f64 {
    match v {
        Value::Number(n) => n.as_f64().unwrap(),
        Value::String(s) if s == "inf" => f64::INFINITY,
        other => panic!("not a number: {other}"),
    }
}

fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    path
}

/// Q on {0, 1}, P on {0, 2}: Q is not absolutely continuous w.r.t. P.
fn pair(dir: &TempDir) {
    write(dir, "q.csv", "x,w\n0,0.5\n1,0.5\n");
    write(dir, "p.csv", "x,w\n0,0.2\n2,0.8\n");
}

fn samples(n: usize, shift: f64) -> String {
    (0..n)
        .map(|i| format!("{:.6}\n", (i as f64 * 0.618_034).fract() * 2.0 - 1.0 + shift))
        .collect()
}

#[test]
fn equal_measures_have_zero_divergence() {
    let dir = TempDir::new().unwrap();
    pair(&dir);
    let v = json(&fgamma(&["divergence", "--q", "q.csv", "--p", "q.csv", "--mode", "fgamma"], dir.path()));
    assert!(num(&v["value"]).abs() <= 1e-9);
}

#[test]
fn all_mode_reports_sandwich() {
    let dir = TempDir::new().unwrap();
    pair(&dir);
    let v = json(&fgamma(&["divergence", "--q", "q.csv", "--p", "p.csv", "--mode", "all"], dir.path()));
    assert_eq!(v["sandwich_holds"], Value::Bool(true));
    assert!(num(&v["df"]).is_infinite());
    let dfg = num(&v["dfgamma"]);
    assert!(dfg > 0.0 && dfg <= num(&v["ipm"]) + 1e-8);
}

#[test]
fn infconv_returns_intermediate_measure() {
    let dir = TempDir::new().unwrap();
    pair(&dir);
    let v = json(&fgamma(&["divergence", "--q", "q.csv", "--p", "p.csv", "--mode", "infconv"], dir.path()));
    let mass: f64 = v["eta_star"]["weights"].as_array().unwrap().iter().map(num).sum();
    assert!((mass - 1.0).abs() <= 1e-8);
    assert!(v["transport_plan"].is_array());
    let dual = json(&fgamma(&["divergence", "--q", "q.csv", "--p", "p.csv", "--mode", "fgamma"], dir.path()));
    assert!((num(&v["value"]) - num(&dual["value"])).abs() <= 1e-8);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    pair(&dir);
    let args = ["divergence", "--q", "q.csv", "--p", "p.csv", "--mode", "all"];
    assert_eq!(fgamma(&args, dir.path()).stdout, fgamma(&args, dir.path()).stdout);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    pair(&dir);
    let code = |args: &[&str]| fgamma(args, dir.path()).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["divergence", "--q", "missing.csv", "--p", "p.csv"]), Some(2));
    assert_eq!(code(&["divergence", "--q", "q.csv", "--p", "p.csv", "--f", "nope"]), Some(2));
    assert_eq!(code(&["divergence", "--bogus"]), Some(2));
    write(&dir, "bad.json", r#"{"q": "q.csv", "p": "p.csv", "unknown_key": 1}"#);
    assert_eq!(code(&["divergence", "--config", "bad.json"]), Some(2));
    let err = fgamma(&["divergence", "--q", "missing.csv", "--p", "p.csv"], dir.path());
    let e: Value = serde_json::from_slice(&err.stderr).expect("JSON error on stderr");
    assert!(e["error"].is_string() && e["message"].is_string());
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    pair(&dir);
    write(&dir, "run.json", r#"{"q": "q.csv", "p": "p.csv", "mode": "ipm", "lip": 2.0}"#);
    let from_cfg = json(&fgamma(&["divergence", "--config", "run.json"], dir.path()));
    let direct = json(&fgamma(&["divergence", "--q", "q.csv", "--p", "p.csv", "--mode", "ipm", "--lip", "2"], dir.path()));
    assert_eq!(from_cfg, direct);
    let overridden = json(&fgamma(&["divergence", "--config", "run.json", "--lip", "1"], dir.path()));
    assert!((num(&overridden["value"]) * 2.0 - num(&from_cfg["value"])).abs() <= 1e-9);
}

#[test]
fn out_flag_writes_file() {
    let dir = TempDir::new().unwrap();
    pair(&dir);
    let out = fgamma(&["divergence", "--q", "q.csv", "--p", "p.csv", "--out", "r.json"], dir.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert!(num(&v["value"]) > 0.0);
}

#[test]
fn estimate_on_identical_samples_is_zero() {
    let dir = TempDir::new().unwrap();
    write(&dir, "s.csv", &samples(40, 0.0));
    let v = json(&fgamma(
        &["estimate", "--q-samples", "s.csv", "--p-samples", "s.csv", "--penalty", "one", "--trace", "t.csv"],
        dir.path(),
    ));
    assert!(num(&v["value"]).abs() <= 1e-6);
    let trace = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(trace.starts_with("iteration,objective"));
}

#[test]
fn estimate_without_shift_and_reruns() {
    let dir = TempDir::new().unwrap();
    write(&dir, "q.csv", &samples(40, 0.0));
    write(&dir, "p.csv", &samples(40, 0.7));
    let args = [
        "estimate", "--q-samples", "q.csv", "--p-samples", "p.csv", "--no-shift", "--max-iter", "200", "--trace", "t.csv",
    ];
    let a = fgamma(&args, dir.path());
    let v = json(&a);
    assert!(v["nu"].is_null());
    assert!(num(&v["value"]) > 0.0);
    assert_eq!(a.stdout, fgamma(&args, dir.path()).stdout);
}

#[test]
fn estimate_rejects_alpha_below_one_without_shift() {
    let dir = TempDir::new().unwrap();
    write(&dir, "s.csv", &samples(10, 0.0));
    let out = fgamma(
        &["estimate", "--q-samples", "s.csv", "--p-samples", "s.csv", "--f", "alpha:0.5", "--no-shift"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dirac_figure_masses_in_range() {
    let dir = TempDir::new().unwrap();
    let v = json(&fgamma(&["dirac-figure", "--x2-steps", "12", "--csv", "d.csv"], dir.path()));
    assert_eq!(v["mass_nondecreasing"], Value::Bool(true));
    assert!(dir.path().join("d.py").exists());
    let mut rdr = csv::Reader::from_path(dir.path().join("d.csv")).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "eta_x2_mass").unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let m: f64 = rec.unwrap()[col].parse().unwrap();
        assert!((1.0 / 3.0 - 1e-12..=2.0 / 3.0 + 1e-12).contains(&m));
        rows += 1;
    }
    assert_eq!(rows, 36);
}

#[test]
fn proptest_suites_pass() {
    let dir = TempDir::new().unwrap();
    for suite in ["sandwich", "dpi", "infconv"] {
        let v = json(&fgamma(&["proptest", "--suite", suite, "--n", "10", "--seed", "3"], dir.path()));
        assert_eq!(v["failed"], Value::from(0), "{suite}");
    }
}

#[test]
fn limits_scan_is_monotone() {
    let dir = TempDir::new().unwrap();
    write(&dir, "q.csv", "x,w\n0,0.6\n1,0.4\n");
    write(&dir, "p.csv", "x,w\n0,0.3\n1,0.7\n");
    let out = fgamma(&["limits", "--q", "q.csv", "--p", "p.csv", "--scales", "0.01,0.1,1,10"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
