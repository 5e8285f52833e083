use std::path::Path;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nrule-sim"))
        .args(args)
        .env_remove("NRULE_SIM_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const GOOD: &str = r#"{
  "basis": [{"index": 0, "label": "psi d0", "tags": []}, {"index": 1, "label": "d1", "tags": []}],
  "components": [
    {"id": 0, "label": "psi d0", "members": [0], "initialStatus": "realized"},
    {"id": 1, "label": "d1", "members": [1], "initialStatus": "dormant"}
  ],
  "diag": [0.0, 0.0],
  "couplings": [{"from": 0, "to": 1, "re": 1.0, "im": 0.0, "kind": "gap"}],
  "initialAmplitudes": [{"index": 0, "re": 1.0, "im": 0.0}]
}"#;

const NON_HERMITIAN: &str = r#"{
  "basis": [{"index": 0, "label": "a", "tags": []}, {"index": 1, "label": "b", "tags": []},
            {"index": 2, "label": "c", "tags": []}],
  "components": [
    {"id": 0, "label": "ab", "members": [0, 1], "initialStatus": "realized"},
    {"id": 1, "label": "c", "members": [2], "initialStatus": "dormant"}
  ],
  "diag": [0.0, 0.0, 0.0],
  "couplings": [
    {"from": 0, "to": 1, "re": 1.0, "im": 0.0, "kind": "continuous"},
    {"from": 1, "to": 0, "re": 0.5, "im": 0.0, "kind": "continuous"},
    {"from": 1, "to": 2, "re": 1.0, "im": 0.0, "kind": "gap"}
  ],
  "initialAmplitudes": [{"index": 0, "re": 1.0, "im": 0.0}]
}"#;

#[test]
fn list_scenarios_prints_every_id() {
    let o = sim(&["list-scenarios"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 10);
    assert!(text
        .lines()
        .any(|l| l.starts_with("parallel-branch\tgR=1, gL=2")));
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.json", GOOD);
    let bad = write(dir.path(), "bad.json", NON_HERMITIAN);
    let garbled = write(dir.path(), "garbled.json", "{\"basis\": 3}");
    assert_eq!(sim(&["validate", &good]).status.code(), Some(0));
    let o = sim(&["validate", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-Hermitian"));
    assert_eq!(sim(&["validate", &garbled]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(sim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sim(&["run"]).status.code(), Some(1));
    assert_eq!(sim(&["run", "no-such-scenario"]).status.code(), Some(1));
    assert_eq!(
        sim(&["run", "parallel-branch", "-p", "zz=1"]).status.code(),
        Some(1)
    );
    assert_eq!(
        sim(&["run", "parallel-branch", "--policy", "sometimes"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        sim(&["run", "parallel-branch", "--samples", "0.1"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn numerical_failure_exits_three() {
    let o = sim(&[
        "run",
        "rabi-absorption",
        "--tol",
        "1e-15",
        "--dt-init",
        "0.5",
        "--dt-floor",
        "0.5",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn run_is_deterministic_and_policy_free() {
    let a = stdout(&sim(&["run", "multi-sequence", "--seed", "8"]));
    let b = stdout(&sim(&["run", "multi-sequence", "--seed", "8"]));
    let p = stdout(&sim(&[
        "run",
        "multi-sequence",
        "--seed",
        "8",
        "--policy",
        "phantom",
    ]));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 3);
    assert!(p.lines().next().unwrap().contains("\"policy\":\"phantom\""));
    assert_eq!(
        a.lines().skip(1).collect::<Vec<_>>(),
        p.lines().skip(1).collect::<Vec<_>>()
    );
    let c = stdout(&sim(&["run", "multi-sequence", "--seed", "9"]));
    assert_ne!(a, c);
}

#[test]
fn run_from_file_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "capture.json", GOOD);
    let samples = dir.path().join("s.csv");
    let log = dir.path().join("log.jsonl");
    let o = sim(&[
        "run",
        &good,
        "--seed",
        "1",
        "--tmax",
        "2",
        "--samples",
        "0.5",
        "--samples-out",
        samples.to_str().unwrap(),
        "--out",
        log.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(log).unwrap();
    assert!(log.starts_with("{\"scenario\":\"capture\""));
    let csv = std::fs::read_to_string(samples).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,psi d0,d1");
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn ensemble_report_csv_and_assert() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let report = dir.path().join("out.json");
    let o = sim(&[
        "ensemble",
        "parallel-branch",
        "--trials",
        "3000",
        "--seed",
        "4",
        "--report",
        report.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
        "--assert",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(v["n"], 3000);
    let total: u64 = v["outcomeCounts"]
        .as_object()
        .unwrap()
        .values()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(total, 3000);
    assert_eq!(v["oracleComparison"]["pass"], true);
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "outcome,count,frequency,oracleP,z"
    );
    assert!(text.lines().any(|l| l.starts_with("A_r > A_f,")));
}

#[test]
fn ensemble_threads_do_not_change_output() {
    let run = |threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_nrule-sim"))
            .args([
                "ensemble",
                "localization",
                "--trials",
                "400",
                "--seed",
                "2",
                "--workers",
                "3",
            ])
            .env("NRULE_SIM_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        o.stdout
    };
    assert_eq!(run("1"), run("4"));
    let o = Command::new(env!("CARGO_BIN_EXE_nrule-sim"))
        .args(["ensemble", "localization", "--trials", "10"])
        .env("NRULE_SIM_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ensemble_assert_on_file_graph() {
    let dir = tempfile::tempdir().unwrap();
    let capture = write(dir.path(), "capture.json", GOOD);
    let ok = sim(&["ensemble", &capture, "--trials", "500", "--assert"]);
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
}

#[test]
fn oracle_modes() {
    let o = sim(&["oracle", "parallel-branch", "--tmax", "50"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mode"], "raceQuadrature");
    let r = v["values"]["A_r > A_f"].as_f64().unwrap();
    assert!((r - 0.2).abs() < 1e-3);

    let o = sim(&["oracle", "observer-chain", "--points", "201"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["mode"], "unitary");
    assert!(v["values"]["peakSimultaneous"].as_f64().unwrap() >= 0.05);
    assert_eq!(v["series"].as_array().unwrap().len(), 201);
}
