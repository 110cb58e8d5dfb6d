use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasitrace"))
        .env_remove("QUASITRACE_OUT")
        .env_remove("QUASITRACE_WORKERS")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn read(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn dos_then_fit_decay_gives_free_exponent() {
    let d = dir("dos-fit");
    let o = run(&d, &["spectrum", "dos", "--v", "0", "--sites", "2048", "--bins", "128"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let input = d.join("spectrum-dos.json");
    let o = run(&d, &["fit-decay", "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let fit = read(&d.join("spectrum-fit-decay.json"));
    let rho = fit["result"]["rho_hat"].as_f64().unwrap();
    assert!((rho - 0.5).abs() <= 0.05, "rho_hat {rho}");
    let dos = read(&input);
    assert_eq!(fit["config"]["input_manifest_hash"], dos["manifest_hash"]);
}

#[test]
fn linear_control_is_degenerate() {
    let d = dir("qnl-linear");
    let o = run(&d, &["qnl", "--system", "linear-test", "--pairs", "1000"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = &read(&d.join("hyperbolic-qnl.json"))["result"];
    assert!(r["gamma_hat"].is_null());
    assert_eq!(r["degenerate"], Value::Bool(true));
    assert!(r["mass"].as_array().unwrap().iter().all(|m| m.as_f64() == Some(1.0)));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = dir("config");
    let cfg = d.join("c.json");
    std::fs::write(&cfg, r#"{"v": 0.02, "seed": 9}"#).unwrap();
    let o = run(&d, &["--config", cfg.to_str().unwrap(), "trace-map", "cocycle"]);
    assert_eq!(o.status.code(), Some(0));
    let a = read(&d.join("trace-map-cocycle.json"));
    assert_eq!(a["config"]["v"].as_f64(), Some(0.02));
    assert_eq!(a["config"]["seed"].as_u64(), Some(9));
    let o = run(&d, &["--config", cfg.to_str().unwrap(), "cocycle", "--v", "0.03", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let b = read(&d.join("trace-map-cocycle.json"));
    assert_eq!(b["config"]["v"].as_f64(), Some(0.03));
    assert_eq!(b["config"]["seed"].as_u64(), Some(1));
    assert_ne!(a["manifest_hash"], b["manifest_hash"]);
}

#[test]
fn manifest_records_hash_and_wall_time() {
    let d = dir("manifest");
    assert_eq!(run(&d, &["fixed-point", "--v", "0.1"]).status.code(), Some(0));
    let a = read(&d.join("trace-map-fixed-point.json"));
    let m = read(&d.join("trace-map-fixed-point.manifest.json"));
    assert_eq!(a["manifest_hash"], m["manifest_hash"]);
    assert_eq!(a["manifest_hash"].as_str().unwrap().len(), 64);
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(a.get("wall_time_s").is_none());
    assert_eq!(a["config"]["seed"].as_u64(), Some(0));
}

#[test]
fn csv_rows_carry_the_hash() {
    let d = dir("csv");
    assert_eq!(run(&d, &["--format", "csv", "words", "--system", "triadic", "--n", "2"]).status.code(), Some(0));
    let text = std::fs::read_to_string(d.join("thermo-words.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().ends_with(",manifest_hash"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    let hash = rows[0].rsplit(',').next().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(rows.iter().all(|r| r.ends_with(hash)));
}

#[test]
fn artifacts_do_not_depend_on_workers() {
    let a = dir("workers-1");
    let b = dir("workers-3");
    let args = ["spectrum", "dos", "--v", "0.5", "--sites", "512", "--phases", "6", "--seed", "4"];
    assert_eq!(run(&a, &[&["--workers", "1"][..], &args].concat()).status.code(), Some(0));
    assert_eq!(run(&b, &[&["--workers", "3"][..], &args].concat()).status.code(), Some(0));
    let x = std::fs::read(a.join("spectrum-dos.json")).unwrap();
    let y = std::fs::read(b.join("spectrum-dos.json")).unwrap();
    assert_eq!(x, y);
}

#[test]
fn exit_codes_by_error_family() {
    let d = dir("exit");
    assert_eq!(run(&d, &["cocycle", "--v", "abc"]).status.code(), Some(2));
    assert_eq!(run(&d, &["dos", "--sites", "3"]).status.code(), Some(2));
    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"not_a_key": 1}"#).unwrap();
    assert_eq!(run(&d, &["--config", bad.to_str().unwrap(), "cocycle"]).status.code(), Some(2));
    assert_eq!(run(&d, &["fit-decay", "--input", "/nonexistent/x.json"]).status.code(), Some(4));
    let blocker = d.join("file");
    std::fs::write(&blocker, "").unwrap();
    assert_eq!(run(&blocker.join("sub"), &["fixed-point"]).status.code(), Some(4));
    // module precondition failures count as bad input
    assert_eq!(run(&d, &["hyperbolic", "frame", "--v", "0"]).status.code(), Some(2));
    assert_eq!(run(&d, &["sum", "--n", "4", "--blocks", "1", "--term-budget", "1"]).status.code(), Some(3));
    assert_eq!(run(&d, &["--help"]).status.code(), Some(0));
}
