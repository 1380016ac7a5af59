//! Golden invocations of the command-line interface: exit codes, determinism,
//! and the run-directory layout.

use std::path::Path;
use std::process::Command;

fn homlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_homlab"))
}

#[test]
fn gen_field_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("f1.hgfd");
    let out2 = dir.path().join("f2.hgfd");
    for out in [&out1, &out2] {
        let status = homlab()
            .args([
                "gen-field", "--beta", "1", "--d", "2", "--n", "64", "--seed", "1", "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[0..4], b"HGFD");
}

#[test]
fn identities_run_exits_zero_with_residual_table() {
    let output = homlab()
        .args([
            "identities", "--beta", "4", "--d", "2", "--n", "32", "--seed", "7", "--tol", "1e-10",
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("identity residuals"));
    assert!(stdout.contains("i1"));
}

#[test]
fn sweep_missing_config_exits_one() {
    let output = homlab()
        .args(["sweep", "--config", "missing.cfg", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("\"error\""), "stderr: {stderr}");
}

#[test]
fn unknown_flag_prints_usage() {
    let output = homlab().args(["sweep", "--bogus"]).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.to_lowercase().contains("usage") || stderr.contains("--help"));
}

#[test]
fn numerical_failure_exits_two() {
    // A clip tolerance of zero is unattainable for the periodized kernel.
    let output = homlab()
        .args([
            "gen-field",
            "--beta",
            "1",
            "--d",
            "2",
            "--n",
            "256",
            "--seed",
            "1",
            "--clip-tol",
            "1e-9",
            "--out",
            "/tmp/never.hgfd",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("clipped-spectrum"), "stderr: {stderr}");
}

#[test]
fn sweep_writes_self_describing_run_dir_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("toy.cfg");
    std::fs::write(
        &cfg_path,
        "master_seed = 5\nn_samples = 8\ndim = 2\nn = 32\nextent = 16.0\nbeta = 4.0\n\
         eps = 0.5,0.25,0.125\nradius = 0.5\ntol = 1e-8\npilot_samples = 2\n",
    )
    .unwrap();
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    for run in [&run1, &run2] {
        let status = homlab()
            .args(["sweep", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(run)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in ["config.echo", "samples.csv", "scaling.json", "log.txt"] {
        assert!(run1.join(name).exists(), "missing {name}");
    }
    let csv1 = std::fs::read(run1.join("samples.csv")).unwrap();
    let csv2 = std::fs::read(run2.join("samples.csv")).unwrap();
    assert_eq!(csv1, csv2, "CSV must be byte-identical across reruns");

    // the echoed config reproduces the run: parse and compare
    let echo = std::fs::read_to_string(run1.join("config.echo")).unwrap();
    assert!(echo.contains("master_seed = 5"));

    // report renders from the persisted run
    let output = homlab()
        .args(["report", "--run"])
        .arg(&run1)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(run1.join("report.svg").exists());
    let svg = std::fs::read_to_string(run1.join("report.svg")).unwrap();
    assert!(svg.contains("<svg"));
}

#[test]
fn report_on_empty_dir_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let output = homlab()
        .args(["report", "--run"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn corrector_writes_field_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corr");
    let status = homlab()
        .args([
            "corrector", "--beta", "4", "--d", "2", "--n", "16", "--seed", "3", "--tol", "1e-9",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["a.hgfd", "phi.hgfd", "q.hgfd", "sigma.hgfd", "corrector.json"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("corrector.json")).unwrap())
            .unwrap();
    assert!(sidecar["abar"].is_array());
    assert!(sidecar["reports"][0]["converged"].as_bool().unwrap());
}

#[test]
fn hgfd_files_reload_through_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.hgfd");
    assert!(homlab()
        .args([
            "gen-field", "--beta", "4", "--d", "2", "--n", "32", "--seed", "9", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let field = homlab::hgfd::read_file(Path::new(&out), 16.0).unwrap();
    assert_eq!(field.comps(), 1);
    assert_eq!(field.grid().n(), 32);
}
