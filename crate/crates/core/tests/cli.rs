use kinetic_core::model::TINY_CONFIG;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kinetic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinetic")).args(args).output().expect("binary runs")
}

fn tiny(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY_CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

fn run(config: &str, kind: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.to_string_lossy();
    let mut args = vec!["run", "--config", config, "--kind", kind, "--out", &out];
    args.extend_from_slice(extra);
    kinetic(&args)
}

#[test]
fn missing_config_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("/nonexistent/tiny.toml", "cluster-verify", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, TINY_CONFIG.replace("kernel_int = \"uniform\"", "kernel_int = [0.5, 0.4, 0.5, 0.5]")).unwrap();
    let out = run(&path.to_string_lossy(), "cluster-verify", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&tiny(dir.path()), "no-such-kind", dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cluster_verify_passes_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let res = dir.path().join("res");
    let out = run(&tiny(dir.path()), "cluster-verify", &res, &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(res.join("cluster_verify.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,s,n,direction,residual"));
    for line in lines {
        let r: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(r <= 1e-9, "{line}");
    }
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(res.join("cluster-verify.meta.json")).unwrap()).unwrap();
    for key in ["config_hash", "seed", "version", "started_at", "finished_at", "checks"] {
        assert!(meta.get(key).is_some(), "{key}");
    }
}

#[test]
fn mc_vs_exact_seed_42_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&tiny(dir.path()), "mc-vs-exact", dir.path(), &["--seed", "42"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(dir.path().join("montecarlo.csv")).unwrap();
    let z_col = csv.lines().next().unwrap().split(',').position(|c| c == "z_score").unwrap();
    for line in csv.lines().skip(1) {
        let z: f64 = line.split(',').nth(z_col).unwrap().parse().unwrap();
        assert!(z.abs() <= 3.0, "{line}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run(&config, "mc-vs-exact", out, &["--seed", "7", "--eps", "0.1"]);
        run(&config, "fp-trajectory", out, &["--t-max", "0.5", "--dt", "0.01"]);
    }
    for file in ["hierarchy.csv", "montecarlo.csv", "fp_trajectory.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn failing_tolerance_exits_with_code_two() {
    // The first-order truncation leaves an O(eps^2) duality residual.
    let dir = tempfile::tempdir().unwrap();
    let out = run(&tiny(dir.path()), "duality-sweep", dir.path(), &["--eps", "0.2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL duality_max_abs_residual"));
    assert!(dir.path().join("duality.csv").exists());
}

#[test]
fn report_summarizes_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(dir.path());
    let res = dir.path().join("res");
    run(&config, "eps-convergence", &res, &["--format", "json"]);
    run(&config, "duality-sweep", &res, &["--eps", "0"]);
    let long = dir.path().join("long.csv");
    let out = kinetic(&["report", &res.to_string_lossy(), "--csv", &long.to_string_lossy()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("fitted slope"), "{text}");
    assert!(text.contains("duality residual by t"), "{text}");
    assert!(text.contains("worst residuals"), "{text}");
    let long = fs::read_to_string(long).unwrap();
    assert!(long.starts_with("experiment,table,row,column,value\n"));
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinetic(&["report", &dir.path().to_string_lossy()]);
    assert_ne!(out.status.code(), Some(0));
}
