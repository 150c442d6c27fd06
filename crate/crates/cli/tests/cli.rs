use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn shipped(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn rhflow(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rhflow"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A torus config small enough for repeated probe estimation.
fn small_torus() -> Value {
    let mut cfg = shipped("torus.json");
    cfg["manifold"]["grid"] = 16.into();
    cfg["sobolev"]["times"] = serde_json::json!([0.0, 0.25, 0.5]);
    cfg["sobolev"]["probe_fiber"] = 8.into();
    cfg["samples"] = serde_json::json!([
        {"x": [1, 2, 3], "t": 0.3, "y": [1, 2, 3], "s": 0.1},
        {"x": [8, 0, 4], "t": 0.5, "y": [0, 8, 12], "s": 0.0}
    ]);
    cfg
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn run_flow_sphere_matches_closed_form_radius() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "sphere.json", &shipped("sphere.json"));
    let o = rhflow(&["run-flow", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("min_S"));
    let rows = csv_rows(&dir.path().join("trajectory.csv"));
    assert!(rows.len() > 10);
    for r in rows {
        let t: f64 = r[0].parse().unwrap();
        let r2: f64 = r[1].parse().unwrap();
        let exact = 1.0 - 4.0 * t;
        assert!(
            (r2 - exact).abs() <= 1e-8 * exact,
            "t = {t}: {r2} vs {exact}"
        );
    }
}

#[test]
fn increasing_coupling_exits_with_config_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = shipped("torus.json");
    cfg["manifold"]["coupling"] =
        serde_json::json!({"form": "LINEAR_FLOOR", "alpha0": 1.0, "rate": -0.5, "floor": 1.0});
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = rhflow(&["run-flow", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("non-increasing"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_with_config_error() {
    let dir = TempDir::new().unwrap();
    let o = rhflow(&["run-flow", "/nonexistent/run.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn kernel_rejects_reversed_times() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "torus.json", &shipped("torus.json"));
    let o = rhflow(
        &["kernel", cfg.to_str().unwrap(), "--s", "0.2", "--t", "0.1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    let o = rhflow(
        &["kernel", cfg.to_str().unwrap(), "--s", "0.1", "--t", "0.1"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn torus_forward_solver_reports_small_oracle_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "torus.json", &shipped("torus.json"));
    let args = [
        "kernel",
        cfg.to_str().unwrap(),
        "--source",
        "forward",
        "--s",
        "0.0",
        "--t",
        "0.1",
        "--y",
        "0,0,0",
    ];
    let o = rhflow(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("max relative error"))
        .unwrap()
        .to_owned();
    let err: f64 = line.split_whitespace().last().unwrap().parse().unwrap();
    assert!(err <= 1e-3, "{line}");
}

#[test]
fn sphere_kernel_conjugate_mass_is_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "sphere.json", &shipped("sphere.json"));
    let o = rhflow(
        &[
            "kernel",
            cfg.to_str().unwrap(),
            "--s",
            "0.0",
            "--t",
            "0.05",
            "--x",
            "17",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("kernel.csv")).unwrap();
    let meta: Value =
        serde_json::from_str(text.lines().next().unwrap().trim_start_matches("# ")).unwrap();
    let jt = meta["extra"]["Jtilde_s"].as_f64().unwrap();
    assert!((jt - 1.0).abs() <= 1e-6, "{jt}");
    assert!(meta["extra"]["semigroup_residual"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn sphere_estimate_has_constant_a_and_zero_b() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "sphere.json", &shipped("sphere.json"));
    let o = rhflow(
        &[
            "estimate-sobolev",
            cfg.to_str().unwrap(),
            "--times",
            "0,0.05,0.1",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("sobolev.csv"));
    assert_eq!(rows.len(), 3);
    assert!(rows
        .iter()
        .all(|r| r[1] == rows[0][1] && r[2].parse::<f64>().unwrap() == 0.0 && r[4] == "true"));
}

#[test]
fn torus_estimate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "torus.json", &small_torus());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(rhflow(&["estimate-sobolev", cfg.to_str().unwrap()], &a)
        .status
        .success());
    assert!(rhflow(&["estimate-sobolev", cfg.to_str().unwrap()], &b)
        .status
        .success());
    let first = std::fs::read(a.join("sobolev.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.join("sobolev.csv")).unwrap());
    let rows = csv_rows(&a.join("sobolev.csv"));
    assert!(rows
        .iter()
        .all(|r| r[2].parse::<f64>().unwrap() > 0.0 && r[4] == "false"));
}

#[test]
fn override_curves_are_echoed_verbatim() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_torus();
    cfg["sobolev"]["override"] = serde_json::json!([[0.0, 0.25, 0.5], [0.5, 0.25, 0.75]]);
    let path = write_config(dir.path(), "torus.json", &cfg);
    let o = rhflow(&["estimate-sobolev", path.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("sobolev.csv"));
    let got: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| {
            (
                r[0].parse().unwrap(),
                r[1].parse().unwrap(),
                r[2].parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(got, vec![(0.0, 0.25, 0.5), (0.5, 0.25, 0.75)]);
}

#[test]
fn sphere_verify_passes_corollary() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "sphere.json", &shipped("sphere.json"));
    let o = rhflow(&["verify", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("bound_report.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "ratio_corollary").unwrap();
    for r in csv_rows(&dir.path().join("bound_report.csv")) {
        assert!(r[col].parse::<f64>().unwrap() >= 1.0);
    }
}

#[test]
fn torus_verify_passes_theorem() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "torus.json", &small_torus());
    let o = rhflow(&["verify", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("bound_report.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "ratio_theorem").unwrap();
    for r in csv_rows(&dir.path().join("bound_report.csv")) {
        assert!(r[col].parse::<f64>().unwrap() >= 1.0);
    }
}

#[test]
fn tiny_constants_fail_verification_with_sample_list() {
    let dir = TempDir::new().unwrap();
    let mut cfg = small_torus();
    cfg["sobolev"]["override"] = serde_json::json!([[0.0, 1e-6, 0.0], [0.5, 1e-6, 0.0]]);
    let path = write_config(dir.path(), "torus.json", &cfg);
    let o = rhflow(&["verify", path.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(
        err.contains("verification failed") && err.contains("x=[1, 2, 3]"),
        "{err}"
    );
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "torus.json", &small_torus());
    let run = |sub: &str, threads: &str| {
        let out = dir.path().join(sub);
        let o = Command::new(env!("CARGO_BIN_EXE_rhflow"))
            .args(["verify", cfg.to_str().unwrap(), "--out"])
            .arg(&out)
            .env("RHFLOW_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(out.join("bound_report.csv")).unwrap()
    };
    let one = run("one", "1");
    assert_eq!(one, run("four", "4"));
    assert_eq!(one, run("again", "1"));
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "sphere.json", &shipped("sphere.json"));
    let o = Command::new(env!("CARGO_BIN_EXE_rhflow"))
        .args(["run-flow", cfg.to_str().unwrap()])
        .arg("--out")
        .arg(dir.path())
        .env("RHFLOW_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_concatenates_outputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "sphere.json", &shipped("sphere.json"));
    let empty = rhflow(&["report", cfg.to_str().unwrap()], dir.path());
    assert_eq!(empty.status.code(), Some(2));
    for sub in [&["run-flow"][..], &["verify"][..]] {
        let mut args = sub.to_vec();
        args.push(cfg.to_str().unwrap());
        assert!(rhflow(&args, dir.path()).status.success());
    }
    let o = rhflow(&["report", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(
        summary.contains("==> trajectory.csv <==") && summary.contains("==> bound_report.csv <==")
    );
    assert!(!summary.contains("kernel.csv"));
}
