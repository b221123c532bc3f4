//! End-to-end runs of the binary: exit codes, report schema, artifact
//! files, and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optfield"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_with_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optfield"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn tiny_theorem_config(sigma: f64, n_potentials: usize) -> String {
    format!(
        r#"{{
  "seed": 11,
  "n_samples": 5000,
  "sigma_multiplier": {sigma},
  "p0": {{ "type": "gaussian", "mean": [0.0, 0.0], "covariance": [[1.0, 0.0], [0.0, 1.0]] }},
  "p1": {{ "type": "gaussian", "mean": [1.0, -1.0], "covariance": [[1.0, 0.0], [0.0, 2.0]] }},
  "theorem": {{
    "n_potentials": {n_potentials},
    "paths": [
      {{ "plan": {{ "type": "independent" }} }},
      {{ "plan": {{ "type": "independent" }},
         "shape": {{ "type": "curved_sine", "amplitude": 0.5, "direction": [0.0, 1.0] }} }}
    ]
  }}
}}"#
    )
}

fn report_without_wall_time(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
    value.as_object_mut().unwrap().remove("wall_time_ms");
    value
}

#[test]
fn bracket_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{
  "seed": 3,
  "bracket": {
    "quadratic": { "count": 4, "dims": [1, 2] },
    "max_affine": { "count": 4, "dims": [1, 2] },
    "points_per_potential": 4
  }
}"#,
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "verify-bracket",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = report_without_wall_time(&out_dir);
    assert_eq!(report["command"], "verify-bracket");
    assert_eq!(report["pass"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 4);
}

#[test]
fn bracket_accepts_explicit_potentials() {
    // The identity potential has a zero field everywhere, so both the
    // analytic and the audited interior terms vanish.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        r#"{
  "seed": 4,
  "bracket": {
    "points_per_potential": 8,
    "explicit_potentials": [
      { "variant": "quadratic", "dim": 2,
        "factor": [[0.0, 0.0], [0.0, 0.0]],
        "shift": [0.0, 0.0], "offset": 0.0, "ridge": 1.0 }
    ]
  }
}"#,
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "verify-bracket",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = report_without_wall_time(&out_dir);
    let checks = report["checks"].as_array().unwrap();
    let analytic = checks
        .iter()
        .find(|c| c["name"] == "bracket-analytic/explicit")
        .unwrap();
    assert_eq!(analytic["value"].as_f64().unwrap(), 0.0);
}

#[test]
fn reports_are_reproducible_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &tiny_theorem_config(4.0, 2));

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let status_a = run(&[
        "verify-theorem",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(status_a.status.code(), Some(0));
    let status_b = run(&[
        "verify-theorem",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(status_b.status.code(), Some(0));
    assert_eq!(
        report_without_wall_time(&out_a),
        report_without_wall_time(&out_b)
    );

    // The env-var fallback caps threads without changing results.
    let out_env = dir.path().join("env");
    let status_env = run_with_env(
        &[
            "verify-theorem",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_env.to_str().unwrap(),
        ],
        "OPTFIELD_THREADS",
        "2",
    );
    assert_eq!(status_env.status.code(), Some(0));
    assert_eq!(
        report_without_wall_time(&out_a),
        report_without_wall_time(&out_env)
    );

    // The theorem command also dumps the raw loss estimates.
    let estimates: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("estimates.json")).unwrap())
            .unwrap();
    let first = &estimates.as_array().unwrap()[0];
    for key in ["loss", "value", "std_error", "n", "seed"] {
        assert!(first.get(key).is_some(), "estimates.json missing {key}");
    }

    // A different seed changes the estimates.
    let out_c = dir.path().join("c");
    run(&[
        "verify-theorem",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_c.to_str().unwrap(),
        "--seed",
        "999",
    ]);
    assert_ne!(
        report_without_wall_time(&out_a),
        report_without_wall_time(&out_c)
    );
}

#[test]
fn malformed_config_exits_one_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, r#"{ "seed": 1, "typo_key": true }"#);
    let out = run(&["verify-theorem", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("typo_key"), "stderr: {stderr}");
    assert!(stderr.contains("line"), "stderr: {stderr}");

    let missing = run(&["verify-theorem"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn failing_check_exits_two_and_names_the_quantity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    write(&cfg, &tiny_theorem_config(1e-9, 1));
    let out_dir = dir.path().join("out");
    let out = run(&[
        "verify-theorem",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("failed checks"), "stderr: {stderr}");
    assert!(stderr.contains("theorem-identity"), "stderr: {stderr}");
    let report = report_without_wall_time(&out_dir);
    assert_eq!(report["pass"], false);
}

#[test]
fn solve_then_push_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let solve_cfg = dir.path().join("solve.json");
    write(
        &solve_cfg,
        r#"{
  "seed": 5,
  "p0": { "type": "gaussian", "mean": [0.0], "covariance": [[1.0]] },
  "p1": { "type": "gaussian", "mean": [0.8], "covariance": [[1.0]] },
  "solve": {
    "loss_kind": "ot",
    "step_size": 0.02,
    "max_epochs": 60,
    "batch": 1024
  }
}"#,
    );
    let solve_out = dir.path().join("solve");
    let out = run(&[
        "solve-ot",
        "--config",
        solve_cfg.to_str().unwrap(),
        "--out",
        solve_out.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(solve_out.join("trace.csv").exists());
    let potential_path = solve_out.join("potential.json");
    assert!(potential_path.exists());
    let trace = std::fs::read_to_string(solve_out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,loss,std_error,grad_norm,wall_time_ms"));

    let push_cfg = dir.path().join("push.json");
    write(
        &push_cfg,
        &format!(
            r#"{{
  "seed": 6,
  "n_samples": 500,
  "p0": {{ "type": "gaussian", "mean": [0.0], "covariance": [[1.0]] }},
  "push": {{
    "potential_file": {},
    "steps": 4,
    "method": "rk4"
  }}
}}"#,
            serde_json::to_string(potential_path.to_str().unwrap()).unwrap()
        ),
    );
    let push_out = dir.path().join("push");
    let out = run(&[
        "push-samples",
        "--config",
        push_cfg.to_str().unwrap(),
        "--out",
        push_out.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let samples = std::fs::read_to_string(push_out.join("samples.csv")).unwrap();
    let mut lines = samples.lines();
    assert_eq!(lines.next().unwrap(), "x0_0,x1_ode_0,x1_map_0");
    assert_eq!(lines.count(), 500);
}

#[test]
fn ofm_relation_runs_on_an_empirical_source() {
    // Exercise the CSV-backed empirical distribution through the CLI.
    let dir = tempfile::tempdir().unwrap();
    let points = dir.path().join("points.csv");
    write(&points, "0.1\n-0.4\n1.3\n0.7\n-0.9\n0.2\n");
    let cfg = dir.path().join("cfg.json");
    write(
        &cfg,
        &format!(
            r#"{{
  "seed": 9,
  "n_samples": 4000,
  "p0": {{ "type": "empirical", "csv": {} }},
  "p1": {{ "type": "gaussian", "mean": [0.5], "covariance": [[1.0]] }},
  "ofm": {{ "n_potentials": 2, "identity_check": false }}
}}"#,
            serde_json::to_string(points.to_str().unwrap()).unwrap()
        ),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "verify-ofm-relation",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(report_without_wall_time(&out_dir)["pass"], true);
}
