use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nbg::Scenario;
use nbody_geodesics::dynamics::energy;
use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn nbg(command: &str, scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nbg"))
        .arg(command)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn propagate_reports_the_energy_of_the_initial_datum() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("two_body_circular.toml");
    let out = nbg("propagate", &path, dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(dir.path().join("summary.json"));
    let sc = Scenario::load(&path).unwrap();
    let (x0, v0) = sc.initial.unwrap();
    assert_eq!(summary["energy"].as_f64().unwrap(), energy(&sc.system, &x0, &v0).unwrap());
    assert_eq!(summary["termination"], "horizon_reached");
    let text = std::fs::read_to_string(dir.path().join("trajectory.txt")).unwrap();
    assert_eq!(text.lines().count(), 4002);
}

#[test]
fn nonpositive_mass_exits_with_validation_code_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "[system]\nmasses = [1.0, 0.0]\ndimension = 2\n\n[initial]\npositions = [[0.0, 0.0], [1.0, 0.0]]\nvelocities = [[0.0, 0.0], [0.0, 0.0]]\n\n[propagate]\nhorizon = 1.0\n",
    );
    let out_dir = dir.path().join("out");
    let out = nbg("propagate", &bad, &out_dir, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("system.masses[1]"));
    assert!(!out_dir.exists());
}

#[test]
fn missing_block_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbg("minimize", &scenario("collision_start.toml"), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("minimize"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let path = scenario("three_body_equilateral.toml");
    for out in [&a, &b] {
        assert!(nbg("propagate", &path, out, &["--jobs", "1"]).status.success());
    }
    for f in ["summary.json", "trajectory.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn classify_matches_the_kepler_regimes() {
    let dir = tempfile::tempdir().unwrap();
    for (file, class) in [
        ("two_body_parabolic.toml", "parabolic"),
        ("two_body_hyperbolic.toml", "hyperbolic"),
        ("two_body_circular.toml", "bounded"),
        ("three_body_equilateral.toml", "parabolic"),
    ] {
        let out = nbg("classify", &scenario(file), dir.path(), &[]);
        assert!(out.status.success(), "{file}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(json(dir.path().join("classify.json"))["report"]["class"], class, "{file}");
    }
}

#[test]
fn potential_rows_carry_audit_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbg("potential", &scenario("two_body_circular.toml"), dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("potential.json"));
    let rows = report["rows"].as_array().unwrap();
    for r in &rows[0]["free_time"].as_array().unwrap()[..] {
        assert_eq!(r["value"].as_f64().unwrap(), 0.0);
    }
    for r in rows[1]["free_time"].as_array().unwrap() {
        assert_eq!(r["symmetry_ok"], true);
    }
    for r in rows[1]["fixed_time"].as_array().unwrap() {
        assert!(r["value"].as_f64().unwrap() >= r["lower_bound"].as_f64().unwrap());
    }
    assert_eq!(report["audit_failures"], 0);
}

#[test]
fn corrupted_constants_fail_the_bounds_suite() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "corrupt.toml",
        "[system]\nmasses = [1.0, 1.0, 1.0]\ndimension = 2\n\n[verify]\ntriples = 2\nbound_samples = 16\nholdout = 8\njm_segments = 2\njm_nonsolutions = 2\nclosedness_members = 1\ncorrupt = { c1 = 0.5, c2 = 0.1 }\n",
    );
    let out = nbg("verify", &path, &dir.path().join("out"), &[]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("action_bounds"));
    let report = json(dir.path().join("out/verify.json"));
    assert_eq!(report["failing"], serde_json::json!(["action_bounds"]));
    assert!(report["bound_constants"]["c1"].is_number());
}

#[test]
fn quick_verify_passes_and_reports_constants() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbg("verify", &scenario("verify_quick.toml"), dir.path(), &["--seed", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("verify.json"));
    assert_eq!(report["passed"], true);
    assert!(report["bound_constants"]["c2"].as_f64().unwrap() > 0.0);
}

#[test]
fn collision_start_ray_leaves_the_collision_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbg("ray", &scenario("collision_start.toml"), dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("ray.json"));
    assert_eq!(report["checks"]["no_collision"], true);
    assert_eq!(report["certificate"]["verdict"], "certified");
    assert!(report["start_time"].as_f64().unwrap() > 0.0);
    // smallest mutual distance along the sampled ray
    let text = std::fs::read_to_string(dir.path().join("ray.txt")).unwrap();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split_whitespace().map(|s| s.parse().unwrap()).collect();
        let q = &v[1..7];
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let r = ((q[2 * i] - q[2 * j]).powi(2) + (q[2 * i + 1] - q[2 * j + 1]).powi(2)).sqrt();
            assert!(r > 1e-3, "separation {r} at t = {}", v[0]);
        }
    }
}

#[test]
fn hyperbolic_ray_is_certified() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbg("ray", &scenario("two_body_hyperbolic.toml"), dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("ray.json"));
    assert_eq!(report["report"]["class"], "hyperbolic");
    assert_eq!(report["certificate"]["verdict"], "certified");
}

#[test]
fn busemann_points_converge() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbg("busemann", &scenario("two_body_parabolic.toml"), dir.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("busemann.json"));
    for p in report["points"].as_array().unwrap() {
        assert_eq!(p["converged"], true);
    }
}

#[test]
fn bad_tolerance_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = nbg("propagate", &scenario("two_body_circular.toml"), dir.path(), &["--tol", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}
