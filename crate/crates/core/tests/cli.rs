mod common;

use std::process::{Command, Output};

use common::scenario_path;

fn dieroll(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dieroll")).args(args).env_remove("DIEROLL_WORKERS").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario(name: &str) -> String {
    scenario_path(name).to_string_lossy().into_owned()
}

#[test]
fn validate_reports_parameters() {
    let o = dieroll(&["validate", &scenario("unbiased_m3_n6")]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("n = 6"), "{}", stdout(&o));
}

#[test]
fn invalid_layout_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        r#"
[protocol]
outcomes = ["1/2", "1/2"]
n = 2

[[layout.balls]]
center = [0.0, 0.0, 0.0]
radius = 1.0
deadline = 5.0

[[layout.balls]]
center = [3.0, 0.0, 0.0]
radius = 1.0
deadline = 0.5

[[parties]]
[[parties]]
"#,
    )
    .unwrap();
    let o = dieroll(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("2r_i < d_ij"), "{err}");
    assert!(err.contains("t_i < d_ij"), "{err}");
}

#[test]
fn malformed_toml_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.toml");
    std::fs::write(&path, "[protocol\noutcomes = 3").unwrap();
    assert_eq!(code(&dieroll(&["validate", path.to_str().unwrap()])), 2);
    assert_eq!(code(&dieroll(&["validate", "/nonexistent/scenario.toml"])), 2);
}

#[test]
fn usage_errors() {
    assert_eq!(code(&dieroll(&["run", "--bogus"])), 1);
    assert_eq!(code(&dieroll(&[])), 1);
    let conflicting = dieroll(&["run", &scenario("unbiased_m2_n2"), "--exact", "--monte-carlo"]);
    assert_eq!(code(&conflicting), 1);
    assert_eq!(code(&dieroll(&["--help"])), 0);
}

#[test]
fn run_writes_report_transcript_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let transcript = dir.path().join("run.log");
    let plot = dir.path().join("plot.tsv");
    let o = dieroll(&[
        "run",
        &scenario("biased_thirds"),
        "--trials",
        "2000",
        "--seed",
        "5",
        "--workers",
        "2",
        "--report",
        report.to_str().unwrap(),
        "--transcript",
        transcript.to_str().unwrap(),
        "--plot-data",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["pass"], true);
    assert_eq!(json["trials"], 2000);
    assert_eq!(json["monte_carlo"]["instances"][0]["trials"], 2000);
    let log = std::fs::read_to_string(&transcript).unwrap();
    assert!(log.lines().any(|l| l.starts_with("outcome")));
    assert!(log.lines().any(|l| l.starts_with("event")));
    let tsv = std::fs::read_to_string(&plot).unwrap();
    assert_eq!(tsv.lines().count(), 3, "{tsv}");

    // same seed, same report whatever the worker count
    let again = dir.path().join("again.json");
    let o = dieroll(&[
        "run",
        &scenario("biased_thirds"),
        "--trials",
        "2000",
        "--seed",
        "5",
        "--workers",
        "1",
        "--report",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let second: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&again).unwrap()).unwrap();
    assert_eq!(json["monte_carlo"], second["monte_carlo"]);
}

#[test]
fn exit_codes_of_failing_scenarios() {
    let skew = dieroll(&["run", &scenario("clock_skew"), "--trials", "500"]);
    assert_eq!(code(&skew), 3, "{}", stdout(&skew));
    let forbidden = dieroll(&["run", &scenario("forbidden_read"), "--trials", "10"]);
    assert_eq!(code(&forbidden), 4);
    assert!(stderr(&forbidden).contains("causality"));
}

#[test]
fn exact_only_run() {
    let o = dieroll(&["run", &scenario("optimal_attack"), "--exact"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("exact") && !out.contains("monte carlo"), "{out}");
}

#[test]
fn suggest_n() {
    let o = dieroll(&["suggest-n", "--dist", "1/3,2/3", "--alpha", "0"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("n = 3"));
    let o = dieroll(&["suggest-n", "--dist", "1/pi,1-1/pi", "--alpha", "0.001"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("n = "));
    let o = dieroll(&["suggest-n", "--dist", "1/pi,1-1/pi", "--alpha", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("irrational"));
}
