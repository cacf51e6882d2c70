use std::path::Path;
use std::process::{Command, Output};

fn mu_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mu-lab")).args(args).env("MU_LAB_THREADS", "1").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_params_exit_codes() {
    let ok = mu_lab(&["check-params", "--config", "builtin:saddle_2d"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["report"]["pass"], true);

    let low = mu_lab(&["check-params", "--config", "builtin:saddle_2d_theta_low"]);
    assert_eq!(code(&low), 2);
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x", "bogus": 1}"#).unwrap();
    let out = mu_lab(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    assert_eq!(code(&mu_lab(&["run", "--config", "builtin:nope"])), 1);
    assert_eq!(code(&mu_lab(&["run", "--config", "/does/not/exist.json"])), 1);
}

#[test]
fn dichotomy_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = mu_lab_core_scenario("scalar_stable_exp");
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["params"]["k"] = serde_json::json!(0.2);
    let path = dir.path().join("tight.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let out = mu_lab(&["verify-dichotomy", "--config", path.to_str().unwrap(), "--samples", "50"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

fn mu_lab_core_scenario(name: &str) -> String {
    mu_lab::scenario::builtin(name).unwrap().to_string()
}

#[test]
fn build_verify_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let art = dir.path().join("eta.json");
    let out = mu_lab(&["build-conjugacy", "--config", "builtin:scalar_unstable_exp", "--out", art.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&art)["schema"], "mu-lab/conjugacy/v1");
    let csv = std::fs::read_to_string(art.with_extension("residuals.csv")).unwrap();
    assert!(csv.starts_with("t,s,c,raw,mu,baseline_raw,baseline_mu\n"));

    let ver = dir.path().join("ver.json");
    let out = mu_lab(&[
        "verify-conjugacy",
        "--result",
        art.to_str().unwrap(),
        "--samples",
        "25",
        "--seed",
        "99",
        "--out",
        ver.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&ver);
    assert_eq!(v["pass"], true);
    assert_eq!(v["residuals"].as_array().unwrap().len(), 25);

    let rep = dir.path().join("report.json");
    let out = mu_lab(&["run", "--config", "builtin:scalar_stable_exp", "--out", rep.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&rep)["seed"], 3);
    let plot = mu_lab(&["emit-plot", "--report", rep.to_str().unwrap(), "--kind", "envelope"]);
    assert_eq!(code(&plot), 0);
    let text = String::from_utf8(plot.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,s,measured,bound,ratio");
    assert!(text.lines().count() > 1);
    assert_eq!(code(&mu_lab(&["emit-plot", "--report", rep.to_str().unwrap(), "--kind", "histogram"])), 1);
}

#[test]
fn run_is_reproducible_apart_from_timings() {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for i in 0..2 {
        let path = dir.path().join(format!("r{i}.json"));
        let out = mu_lab(&["run", "--config", "builtin:scalar_unstable_log", "--out", path.to_str().unwrap()]);
        assert_eq!(code(&out), 0);
        let mut v = json(&path);
        v.as_object_mut().unwrap().remove("timings");
        reports.push(v.to_string());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn stopped_runs_report_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let out = mu_lab(&["run", "--config", "builtin:saddle_2d_delta_over", "--out", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let v = json(&path);
    assert_eq!(v["failed_stage"], "admissibility");
    assert_eq!(v["pass"], false);
}
