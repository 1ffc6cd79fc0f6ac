use std::path::Path;
use std::process::{Command, Output};

use qgcyl::config::RunConfig;

fn qgcyl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgcyl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = r#"
[grid]
nx = 24
ny = 24
nz = 3

[time]
t_end = 0.04

[solver]
c_hat = 2.0
"#;

#[test]
fn invert_manufactured_prints_error_norm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "m.toml",
        "[initial]\npreset = \"manufactured\"\nhomogeneous = false\n[grid]\nnx = 32\nny = 32\nnz = 5\n",
    );
    let out_dir = dir.path().join("out");
    let out = qgcyl(&[
        "invert",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout
        .lines()
        .find(|l| l.contains("L∞"))
        .expect("error line");
    let err: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    // second-order error at h = 2/31, see the convergence criterion
    assert!(err > 1e-3 && err < 3e-2, "{err}");
    for f in [
        "psi.csv",
        "u.csv",
        "mask.csv",
        "summary.json",
        "config.toml",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn zero_end_time_writes_initial_snapshot_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.toml", SMALL);
    let out_dir = dir.path().join("out");
    let out = qgcyl(&[
        "simulate",
        "--config",
        &cfg,
        "--t-end",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let snaps: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().into_string().unwrap())
        .filter(|n| n.starts_with("q_"))
        .collect();
    assert_eq!(snaps, vec!["q_0000.csv".to_string()]);
}

#[test]
fn uniform_pv_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let mask_run = dir.path().join("mask");
    let cfg = write_config(dir.path(), "s.toml", SMALL);
    let out = qgcyl(&[
        "simulate",
        "--config",
        &cfg,
        "--t-end",
        "0",
        "--out",
        mask_run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let mask = std::fs::read_to_string(mask_run.join("mask.csv")).unwrap();
    let mut csv = String::from("x,y,z,value\n");
    for z in [0.0, 0.5, 1.0] {
        for line in mask.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f[2] == "interior" {
                csv += &format!("{},{},{z},1\n", f[0], f[1]);
            }
        }
    }
    let ones = dir.path().join("ones.csv");
    std::fs::write(&ones, csv).unwrap();
    let cfg = write_config(
        dir.path(),
        "ones.toml",
        &format!(
            "{SMALL}\n[initial]\npreset = \"file\"\npath = {:?}\n",
            ones.to_str().unwrap()
        ),
    );
    let out = qgcyl(&[
        "simulate",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("incompatible") && stderr.contains("differ by"),
        "{stderr}"
    );
}

#[test]
fn usage_and_config_errors() {
    assert_eq!(qgcyl(&["simulate", "--bogus"]).status.code(), Some(64));
    assert_eq!(qgcyl(&["frobnicate"]).status.code(), Some(64));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[grid]\nnx = \"many\"\n");
    let out = qgcyl(&["simulate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(65));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("line 2") && stderr.contains("nx"),
        "{stderr}"
    );
    let cfg = write_config(dir.path(), "typo.toml", "[solver]\nsigmaa = 0.5\n");
    assert_eq!(qgcyl(&["invert", "--config", &cfg]).status.code(), Some(65));
}

#[test]
fn simulate_is_deterministic_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "s.toml",
        &format!("{SMALL}\n[output]\ntrajectories = true\n"),
    );
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = qgcyl(&[
            "simulate",
            "--config",
            &cfg,
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let read = |f: &str| std::fs::read(out_dir.join(f)).unwrap();
        files.push((
            read("q_0002.csv"),
            read("diagnostics.csv"),
            read("trajectories.csv"),
        ));
        let echoed = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
        let parsed = RunConfig::parse(&echoed).unwrap();
        assert_eq!(parsed.to_toml().unwrap(), echoed);
        assert_eq!(parsed.output.dir, out_dir);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(summary["solver"]["windows"], 2);
    }
    assert!(files[0] == files[1]);
}
