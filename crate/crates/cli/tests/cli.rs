use std::process::Command;

fn steingrad() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_steingrad"));
    cmd.env_remove("STEINGRAD_SEED");
    cmd
}

fn summary(stdout: &[u8]) -> serde_json::Value {
    serde_json::from_slice(stdout).expect("run prints the JSON summary")
}

#[test]
fn run_writes_a_deterministic_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let path = dir.path().join(name);
        let out = steingrad()
            .args(["run", "--task", "quadratic", "--estimator", "rloo", "--k", "2", "--dim", "10"])
            .args(["--steps", "1000", "--seed", "0", "--no-wall-clock", "--out-path"])
            .arg(&path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        files.push(std::fs::read_to_string(&path).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let lines: Vec<&str> = files[0].lines().collect();
    assert!(lines[0].starts_with("# steingrad v0.1.0 config_sha256="));
    assert_eq!(lines[1], "step,objective,grad_trace_variance,variance_stderr,f_eval_count,net_eval_count,wall_seconds");
    assert_eq!(lines.len(), 1002);
    assert!(dir.path().join("a.summary.json").exists());
}

#[test]
fn rodeo_with_one_sample_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = steingrad()
        .args(["run", "--estimator", "rodeo", "--k", "1", "--out-path"])
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("K ≥ 2"), "{err}");
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn flags_override_file_and_file_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"estimator": "rloo", "steps": 3, "seed": 5}"#).unwrap();
    let trace = dir.path().join("t.csv");

    let out = steingrad()
        .env("STEINGRAD_SEED", "9")
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .args(["--steps", "4", "--out-path"])
        .arg(&trace)
        .output()
        .unwrap();
    let s = summary(&out.stdout);
    assert_eq!(s["config"]["steps"], 4);
    assert_eq!(s["config"]["seed"], 5);
    assert_eq!(s["config"]["estimator"], "rloo");

    let out = steingrad()
        .env("STEINGRAD_SEED", "9")
        .args(["run", "--steps", "2", "--out-path"])
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(summary(&out.stdout)["config"]["seed"], 9);

    let out = steingrad()
        .env("STEINGRAD_SEED", "9")
        .args(["run", "--steps", "2", "--seed", "1", "--out-path"])
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(summary(&out.stdout)["config"]["seed"], 1);
}

#[test]
fn unknown_config_fields_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"stepz": 3}"#).unwrap();
    let out = steingrad().arg("run").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn numerical_abort_exits_nonzero_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let out = steingrad()
        .args(["run", "--estimator", "rloo", "--lr-eta", "1e308", "--steps", "50", "--out-path"])
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let rows = std::fs::read_to_string(&trace).unwrap().lines().count() - 2;
    assert!(rows > 0 && rows < 50);
}

#[test]
fn check_suites_exit_cleanly() {
    for suite in ["operators", "unbiasedness", "gradients"] {
        let out = steingrad().args(["check", suite]).output().unwrap();
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success(), "{text}");
        assert!(text.contains("PASS") && !text.contains("FAIL"), "{text}");
    }
    let out = steingrad().args(["check", "unbiasedness", "--max-tuples", "10"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("SKIP"));
}

#[test]
fn compare_prints_one_row_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("cmp.json");
    let out = steingrad()
        .args([
            "compare",
            "--steps",
            "50",
            "--replicates",
            "3",
            "--variance-probe-samples",
            "50",
            "--estimators",
            "rloo",
        ])
        .arg("--json-out")
        .arg(&json)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), 2, "{text}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);
    assert_eq!(report["seeds"], serde_json::json!([0, 1, 2]));

    let out = steingrad().args(["compare", "--replicates", "2"]).output().unwrap();
    assert!(!out.status.success());
}
