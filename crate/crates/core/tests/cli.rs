use std::process::{Command, Output};

use membrane_lab::harness::experiments::recompute_summaries;
use membrane_lab::harness::results::load;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_membrane-lab")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn unknown_flag_is_a_config_error() {
    let o = lab(&["gamma-fit", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn invalid_values_are_config_errors() {
    assert_eq!(code(&lab(&["levelset-census", "--lambda", "1.5"])), 2);
    assert_eq!(code(&lab(&["tail-fit", "--replicas", "0"])), 2);
    assert_eq!(code(&lab(&["gamma-fit", "--format", "xml"])), 2);
}

#[test]
fn nonconvergence_is_a_solver_failure() {
    let o = lab(&["green", "--size", "6", "--max-dense", "0", "--tol", "1e-300"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stencil_lists_41_coefficients() {
    let o = lab(&["stencil"]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 42);
    assert!(out.contains("0,0,0,0,9/8,"));
}

#[test]
fn exact_tier_passes_with_json_report() {
    let o = lab(&["verify", "--tier", "exact", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let checks = v["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 8);
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert!(checks.iter().any(|c| c["name"].as_str().unwrap().contains("Gibbs")));
}

#[test]
fn gamma_fit_is_deterministic_and_17_digit() {
    let args = ["gamma-fit", "--size", "8,12,16", "--seed", "1", "--format", "json"];
    let (a, b) = (lab(&args), lab(&args));
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let slope = v["summaries"]["slope"].as_f64().unwrap();
    assert!((0.6..1.0).contains(&slope), "{slope}");
    let text = String::from_utf8(a.stdout).unwrap();
    assert!(text.contains("\"slope\":") && text.contains("e-1,"));
}

#[test]
fn csv_output_reloads_with_consistent_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tail.csv");
    let o = lab(&[
        "tail-fit", "--size", "8", "--lambda", "0.2", "--replicas", "6", "--seed", "3", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rs = load(&out).unwrap();
    assert_eq!(rs.records.len(), 6);
    assert_eq!(recompute_summaries(&rs).unwrap(), rs.summaries);
}

#[test]
fn sample_depends_only_on_seed() {
    let a = lab(&["sample", "--size", "4", "--seed", "5"]);
    let b = lab(&["sample", "--size", "4", "--seed", "5"]);
    let c = lab(&["sample", "--size", "4", "--seed", "6"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}
