use std::process::Command;

fn fissure() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fissure"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn kernel_check_passes_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = fissure()
        .args(["kernel-check", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("PASS kernel_exactness"), "{stdout}");
    for f in ["kernel_check.csv", "metrics.json", "inputs.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn invalid_config_exits_with_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"experiment": "simulate", "time": {"dt": -0.1},
            "rocks": {"fracture": {"phi": 1.2, "k": 1, "a": 1}, "matrix": {"phi": 0.2, "k": 1, "a": 2}}}"#,
    )
    .unwrap();
    let target = dir.path().join("out");
    let out = fissure()
        .arg("simulate")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("A1") && err.contains("time.dt"), "{err}");
    assert!(!target.exists());
}

#[test]
fn cell_perm_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = fissure()
        .args(["cell-perm", "--d", "2", "--delta", "0.25,0.125", "--n", "64", "--kf", "2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(dir.path().join("cellperm.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "delta,n,K11,K12,K22,Yf_measure,K11_over_Yf,requested_delta");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].split(',').nth(1) == Some("64"));
    let inputs = std::fs::read_to_string(dir.path().join("inputs.json")).unwrap();
    assert!(inputs.contains("\"kf\": 2.0"), "{inputs}");
}

#[test]
fn validate_prints_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("min.json");
    std::fs::write(
        &cfg,
        r#"{"experiment": "kernel-check",
            "rocks": {"fracture": {"phi": 0.4, "k": 1, "a": 1}, "matrix": {"phi": 0.2, "k": 1, "a": 2}}}"#,
    )
    .unwrap();
    let out = fissure().arg("validate").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["grid"]["nx"], 64);
    assert_eq!(v["experiment"], "kernel-check");
}
