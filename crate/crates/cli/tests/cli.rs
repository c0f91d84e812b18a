//! End-to-end tests of the `ctpeer` binary: command wiring, determinism,
//! provenance headers, and exit codes.

use assert_cmd::Command;
use predicates::prelude::*;

fn ctpeer() -> Command {
    Command::cargo_bin("ctpeer").unwrap()
}

fn scenario(name: &str) -> String {
    format!("{}/../../scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn example2_positive_effect_ordering() {
    ctpeer()
        .args(["example2", "--r100", "0.5", "--r101", "0.8", "--r110", "0.2"])
        .assert()
        .success()
        .stdout(predicate::str::contains(
            "positive peer effect (std > same > diff)",
        ));
}

#[test]
fn example2_negative_effect_ordering() {
    ctpeer()
        .args(["example2", "--r100", "0.5", "--r101", "0.2", "--r110", "0.8"])
        .assert()
        .success()
        .stdout(predicate::str::contains(
            "negative peer effect (same > diff > std)",
        ));
}

#[test]
fn example2_rejects_boundary_values() {
    ctpeer()
        .args(["example2", "--r100", "1.0"])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("outside (0,1)"));
}

#[test]
fn validate_reports_assumptions() {
    ctpeer()
        .args(["validate", "--scenario", &scenario("eight-agent.json")])
        .assert()
        .success()
        .stdout(predicate::str::contains("\"selection_interior\": true"));
}

#[test]
fn validate_warns_on_boundary_selection() {
    // The standard-regime two-agent scenario has Q = 1 everywhere.
    ctpeer()
        .args(["validate", "--scenario", &scenario("two-agent.json")])
        .assert()
        .success()
        .stderr(predicate::str::contains("violates one or more"));
}

#[test]
fn equilibrium_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    ctpeer()
        .args(["equilibrium", "--scenario", &scenario("four-agent.json")])
        .arg("--out")
        .arg(dir.path())
        .assert()
        .success()
        .stdout(predicate::str::contains("stationarity residual"));
    for file in ["generator.csv", "invariant.csv", "assumptions.json"] {
        assert!(dir.path().join(file).exists(), "missing {file}");
    }
    let mu = std::fs::read_to_string(dir.path().join("invariant.csv")).unwrap();
    assert!(mu.starts_with("# ctpeer "), "missing provenance header");
}

#[test]
fn simulate_is_deterministic_given_seed() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&d1, &d2] {
        ctpeer()
            .args([
                "simulate",
                "--scenario",
                &scenario("four-agent.json"),
                "--seed",
                "9",
                "--horizon",
                "50",
            ])
            .arg("--out")
            .arg(dir.path())
            .assert()
            .success()
            .stdout(predicate::str::contains("lambda-hat"));
    }
    let a = std::fs::read(d1.path().join("events.csv")).unwrap();
    let b = std::fs::read(d2.path().join("events.csv")).unwrap();
    assert_eq!(a, b, "same seed must give bit-identical event logs");
}

#[test]
fn simulate_dataset2_and_identify_from_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    ctpeer()
        .args([
            "simulate",
            "--scenario",
            &scenario("four-agent.json"),
            "--seed",
            "4",
            "--horizon",
            "4000",
            "--dataset",
            "2",
            "--delta",
            "0.4",
        ])
        .arg("--out")
        .arg(dir.path())
        .assert()
        .success()
        .stdout(predicate::str::contains("snapshots:"));
    let snapshots = dir.path().join("snapshots.csv");
    assert!(snapshots.exists());

    ctpeer()
        .args(["identify", "--scenario", &scenario("four-agent.json")])
        .arg("--snapshots")
        .arg(&snapshots)
        .arg("--out")
        .arg(dir.path())
        .assert()
        .success()
        .stdout(predicate::str::contains("report written"));
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(parsed["generator"].is_object(), "snapshot path records the generator");
}

#[test]
fn identify_snapshots_without_rates_is_an_explicit_error() {
    let dir = tempfile::tempdir().unwrap();
    ctpeer()
        .args([
            "simulate",
            "--scenario",
            &scenario("four-agent.json"),
            "--horizon",
            "500",
            "--dataset",
            "2",
            "--delta",
            "0.5",
        ])
        .arg("--out")
        .arg(dir.path())
        .assert()
        .success();
    ctpeer()
        .args(["identify", "--scenario", &scenario("four-agent.json")])
        .arg("--snapshots")
        .arg(dir.path().join("snapshots.csv"))
        .arg("--out")
        .arg(dir.path())
        .arg("--without-rates")
        .assert()
        .code(3)
        .stderr(predicate::str::contains("rates required"));
}

#[test]
fn identify_exact_mode_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    ctpeer()
        .args(["identify", "--scenario", &scenario("eight-agent.json"), "--exact"])
        .arg("--out")
        .arg(dir.path())
        .assert()
        .success()
        .stdout(predicate::str::contains("network exact: true"));
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    let errors = &parsed["errors"];
    assert!(errors["kernel_max_abs_error"].as_f64().unwrap() < 1e-8);
    assert!(errors["full_rule_max_abs_error"].as_f64().unwrap() < 1e-8);
}

#[test]
fn identify_requires_an_input_mode() {
    ctpeer()
        .args(["identify", "--scenario", &scenario("four-agent.json")])
        .assert()
        .code(2)
        .stderr(predicate::str::contains("--events, --snapshots, or --exact"));
}

#[test]
fn missing_scenario_file_is_an_io_error() {
    ctpeer()
        .args(["validate", "--scenario", "/nonexistent/path.json"])
        .assert()
        .code(5);
}

#[test]
fn roundtrip_zero_tolerance_fails_with_distinct_code() {
    let dir = tempfile::tempdir().unwrap();
    ctpeer()
        .args([
            "roundtrip",
            "--scenario",
            &scenario("eight-agent.json"),
            "--seed",
            "47",
            "--horizon",
            "2000",
            "--tolerance",
            "0",
        ])
        .arg("--out")
        .arg(dir.path())
        .assert()
        .code(6)
        .stderr(predicate::str::contains("failed configured tolerances"));
    // The summary is still written, with every metric present.
    let summary = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(parsed["all_pass"], serde_json::Value::Bool(false));
    assert!(parsed["replications"][0]["kernel_max_abs_error"].is_number());
}

#[test]
fn out_dir_defaults_to_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    ctpeer()
        .env("CTPEER_OUT", dir.path())
        .args(["equilibrium", "--scenario", &scenario("four-agent.json")])
        .assert()
        .success();
    assert!(dir.path().join("invariant.csv").exists());
}
