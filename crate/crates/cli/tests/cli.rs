use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("dlab starts")
}

#[test]
fn gradcheck_defaults_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = dlab(&["gradcheck"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("ok")).count() >= 6);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck/report.json")).unwrap()).unwrap();
    assert!(report["components"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn unattainable_tolerance_names_components() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.json");
    fs::write(&cfg, r#"{"tolerance": 1e-15, "instances": 1}"#).unwrap();
    let out = dlab(&["gradcheck", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task_loss"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dlab(&["dynamics", "--config", "no_such_config.json"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no_such_config.json"));
    let cfg = dir.path().join("d.json");
    fs::write(&cfg, r#"{"samples": 64, "colour": 3}"#).unwrap();
    let unknown = dlab(&["dynamics", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
    fs::write(&cfg, r#"{"samples": 1}"#).unwrap();
    assert_eq!(dlab(&["dynamics", "--config", cfg.to_str().unwrap()], dir.path()).status.code(), Some(2));
    assert_eq!(dlab(&["experiment", "fig7"], dir.path()).status.code(), Some(2));
    assert_eq!(dlab(&["nonsense"], dir.path()).status.code(), Some(2));
}

#[test]
fn dynamics_is_reproducible_and_plots_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(dlab(&["dynamics", "--seed", "3"], &a).status.code(), Some(0));
    assert_eq!(dlab(&["dynamics", "--seed", "3"], &b).status.code(), Some(0));
    for f in ["trajectory.csv", "summary.json"] {
        assert_eq!(
            fs::read(a.join("dynamics").join(f)).unwrap(),
            fs::read(b.join("dynamics").join(f)).unwrap()
        );
    }
    assert!(!a.join("dynamics/loss.svg").exists());
    let csv = fs::read_to_string(a.join("dynamics/trajectory.csv")).unwrap();
    assert!(csv.starts_with("step,loss,decorrelation,sigma_0,"));

    let p = dir.path().join("p");
    assert_eq!(dlab(&["dynamics", "--plot"], &p).status.code(), Some(0));
    for f in ["loss.svg", "decorrelation.svg", "spectrum.svg"] {
        assert!(fs::read_to_string(p.join("dynamics").join(f)).unwrap().starts_with("<svg"));
    }
}

#[test]
fn equivariance_threshold_is_a_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.json");
    fs::write(
        &cfg,
        r#"{"random": {"batches": 1, "batch": 2, "grid_h": 4, "grid_w": 4}, "max_mu": 1e-12,
            "map": {"kind": "attention", "bias_std": 1.0, "residual": false}}"#,
    )
    .unwrap();
    assert_eq!(dlab(&["equivariance", "--config", cfg.to_str().unwrap()], dir.path()).status.code(), Some(1));
    fs::write(
        &cfg,
        r#"{"random": {"batches": 1, "batch": 2, "grid_h": 4, "grid_w": 4}, "max_mu": 1e-12,
            "map": {"kind": "token_mlp", "hidden": 5}}"#,
    )
    .unwrap();
    assert_eq!(dlab(&["equivariance", "--config", cfg.to_str().unwrap()], dir.path()).status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("equivariance/report.json")).unwrap()).unwrap();
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["mean", "n", "phi_id", "std", "translations"]);
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let bad = Command::new(env!("CARGO_BIN_EXE_dlab"))
        .args(["lowrank", "--out"])
        .arg(dir.path())
        .env("DLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let one = Command::new(env!("CARGO_BIN_EXE_dlab"))
        .args(["lowrank", "--out"])
        .arg(dir.path())
        .env("DLAB_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(one.status.code(), Some(0));
}
