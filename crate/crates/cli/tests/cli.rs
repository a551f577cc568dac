//! End-to-end runs of the `gfdyn` binary: exit codes, artifacts, and the
//! warning/negative-control behavior of each subcommand.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn gfdyn(dir: &Path, config: Option<&str>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gfdyn"));
    if let Some(body) = config {
        let path = dir.join("config.json");
        fs::write(&path, body).unwrap();
        cmd.arg("--config").arg(&path);
    }
    cmd.arg("--out").arg(dir.join("out"));
    cmd.args(args);
    cmd.output().unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process terminated by signal")
}

fn summary(dir: &Path, name: &str) -> serde_json::Value {
    let body = fs::read_to_string(dir.join("out").join(name)).unwrap();
    serde_json::from_str(&body).unwrap()
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(dir.path(), Some("{ this is not json"), &["fixed-points"]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).starts_with("error:"));
}

#[test]
fn unknown_tolerance_key_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(r#"{"tolerances": {"bogus": 1.0}}"#),
        &["verify"],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("bogus"));
}

#[test]
fn empty_verify_corpus_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(r#"{"verify": {"corpus": []}}"#),
        &["verify"],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("corpus"));
}

#[test]
fn crossing_iterate_order_above_cap_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(r#"{"fixture": "hyperbolic", "m_list": [200]}"#),
        &["crossing"],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("cap"));
}

#[test]
fn fixed_points_pseudo_rotation_d2_writes_three_records() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(r#"{"fixture": "pseudo_rotation", "d": 2, "seeds": 6}"#),
        &["fixed-points"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let csv = fs::read_to_string(dir.path().join("out/fixed_points.csv")).unwrap();
    let data_rows = csv.lines().skip(1).filter(|l| !l.is_empty()).count();
    assert_eq!(data_rows, 3);

    let s = summary(dir.path(), "fixed_points_summary.json");
    assert_eq!(s["record_count"], 3);
    assert_eq!(s["max_nullity"], 0);
    assert!(s["tolerances"]["record_residual"].as_f64().unwrap() > 0.0);
}

#[test]
fn zero_hamiltonian_warns_degenerate_and_succeeds() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(r#"{"fixture": "zero", "d": 1, "seeds": 4}"#),
        &["fixed-points"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("degenerate"));
}

#[test]
fn maslov_full_rotation_reports_minus_two() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(
            r#"{"fixture": "pseudo_rotation", "d": 1,
                "maslov": {"path": "full_rotation", "kmax": 6, "mmax": 1, "mean_k": 24}}"#,
        ),
        &["maslov"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let report = summary(dir.path(), "maslov_report.json");
    assert_eq!(report["mas"], -2);
}

#[test]
fn injected_bott_fault_fails_verification() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(
            r#"{"fixture": "pseudo_rotation", "d": 1,
                "maslov": {"path": "full_rotation", "kmax": 6, "mmax": 1, "mean_k": 24,
                           "inject_bott_fault": true}}"#,
        ),
        &["maslov"],
    );
    assert_eq!(code(&out), 1, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("iterate inequality"));
}

#[test]
fn pseudo_rotation_axis_iterate_tables_agree() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(
            r#"{"fixture": "pseudo_rotation", "d": 1,
                "maslov": {"path": "axis", "axis": 0, "kmax": 4, "mmax": 2, "mean_k": 24}}"#,
        ),
        &["maslov"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let s = summary(dir.path(), "maslov_summary.json");
    let tables = s["axis_tables"].as_array().unwrap();
    assert!(!tables.is_empty());
    for table in tables {
        for row in table["rows"].as_array().unwrap() {
            let lhs = row["lhs"].as_f64().unwrap();
            let rhs = row["rhs"].as_f64().unwrap();
            let tol = row["tol"].as_f64().unwrap();
            assert!(
                (lhs - rhs).abs() <= tol,
                "axis table row disagrees: {row}"
            );
        }
    }
}

#[test]
fn crossing_r_above_isolation_warns_but_runs() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(
            r#"{"fixture": "hyperbolic", "d": 1, "r": 0.75, "m_list": [1], "seeds": 2,
                "crossing": {"max_steps": 300, "max_time": 10.0}}"#,
        ),
        &["crossing"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("isolation"));
    let csv = fs::read_to_string(dir.path().join("out/crossing.csv")).unwrap();
    assert!(csv.starts_with("m,seed,direction,crossed,delta_action,steps,termination"));
}

#[test]
fn crossing_runs_are_deterministic() {
    let body = r#"{"fixture": "hyperbolic", "d": 1, "r": 0.2, "m_list": [1], "seeds": 2,
                   "rng_seed": 11, "crossing": {"max_steps": 2000, "max_time": 30.0}}"#;
    let first = TempDir::new().unwrap();
    let second = TempDir::new().unwrap();
    assert_eq!(code(&gfdyn(first.path(), Some(body), &["crossing"])), 0);
    assert_eq!(code(&gfdyn(second.path(), Some(body), &["crossing"])), 0);
    let a = fs::read(first.path().join("out/crossing.csv")).unwrap();
    let b = fs::read(second.path().join("out/crossing.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn verify_default_corpus_passes() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(dir.path(), None, &["verify"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let s = summary(dir.path(), "verify_summary.json");
    assert_eq!(s["failed"], 0);
    assert!(s["passed"].as_u64().unwrap() > 20);
}

#[test]
fn injected_tau_flip_fails_naming_the_identity() {
    let dir = TempDir::new().unwrap();
    let out = gfdyn(
        dir.path(),
        Some(r#"{"verify": {"corpus": ["zero"], "samples": 10, "inject_tau_flip": true}}"#),
        &["verify"],
    );
    assert_eq!(code(&out), 1, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("tau_identity"));
}
