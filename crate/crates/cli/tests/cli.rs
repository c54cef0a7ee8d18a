use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn calib(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calib"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", stderr_of(out));
}

fn simulate_bundle(path: &Path, extra: &[&str]) {
    let path_str = path.to_str().unwrap();
    let mut args = vec![
        "simulate",
        "--trajectory",
        "traj1",
        "--n-arrays",
        "3",
        "--seed",
        "41",
        "--output",
        path_str,
    ];
    args.extend_from_slice(extra);
    assert_code(&calib(&args), 0);
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    simulate_bundle(&a, &["--sigma-tdoa-ms", "0.1", "--sigma-doa-deg", "5"]);
    simulate_bundle(&b, &["--sigma-tdoa-ms", "0.1", "--sigma-doa-deg", "5"]);
    let text_a = fs::read_to_string(&a).unwrap();
    let text_b = fs::read_to_string(&b).unwrap();
    assert_eq!(text_a, text_b);
    assert!(text_a.contains("\"schema_version\": 1"));
    assert!(text_a.contains("\"truth\""));
}

#[test]
fn simulate_then_calibrate_recovers_noiseless_truth() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle.json");
    simulate_bundle(&bundle, &["--sigma-odometry-m", "0"]);
    let report_a = dir.path().join("report_a.json");
    let report_b = dir.path().join("report_b.json");
    for report in [&report_a, &report_b] {
        let out = calib(&[
            "calibrate",
            "--input",
            bundle.to_str().unwrap(),
            "--seed",
            "7",
            "--output",
            report.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        assert!(stdout.contains("errors vs truth"), "stdout: {stdout}");
    }
    assert_eq!(
        fs::read_to_string(&report_a).unwrap(),
        fs::read_to_string(&report_b).unwrap()
    );
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_a).unwrap()).unwrap();
    let errors = &parsed["errors"];
    assert!(errors["location_cm"].as_f64().unwrap() < 1e-3);
    assert!(errors["orientation_deg"].as_f64().unwrap() < 1e-3);
    assert!(parsed["joint"]["converged"].as_bool().unwrap());
}

#[test]
fn calibrate_without_output_prints_report() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle.json");
    simulate_bundle(&bundle, &[]);
    let out = calib(["calibrate", "--input", bundle.to_str().unwrap()].as_ref());
    assert_code(&out, 0);
    let parsed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(parsed["schema_version"], 1);
    assert_eq!(parsed["n_arrays"], 3);
}

#[test]
fn missing_and_malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = calib(&["calibrate", "--input", "/nonexistent/bundle.json"]);
    assert_code(&out, 2);

    let broken = dir.path().join("broken.json");
    fs::write(&broken, "{\n  \"schema_version\": 1,\n  nope\n}\n").unwrap();
    let out = calib(&["calibrate", "--input", broken.to_str().unwrap()]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("broken.json:3"), "{}", stderr_of(&out));

    let out = calib(&[
        "simulate",
        "--trajectory",
        "spiral",
        "--output",
        dir.path().join("x.json").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr_of(&out).contains("spiral"));

    let bundle = dir.path().join("bundle.json");
    simulate_bundle(&bundle, &[]);
    let out = calib(&[
        "calibrate",
        "--input",
        bundle.to_str().unwrap(),
        "--weights",
        "1,2",
    ]);
    assert_code(&out, 2);
}

#[test]
fn too_few_events_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one_event.json");
    let text = r#"{
  "schema_version": 1,
  "trajectory": null,
  "seed": null,
  "n_arrays": 2,
  "n_events": 1,
  "speed_of_sound_m_s": 343.0,
  "emission_intervals_s": [],
  "tdoa_consecutive_s": [[], []],
  "tdoa_interarray_s": [[0.001]],
  "doa": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
  "odometry_m": [],
  "noise": null,
  "truth": null
}
"#;
    fs::write(&path, text).unwrap();
    let out = calib(&["calibrate", "--input", path.to_str().unwrap()]);
    assert_code(&out, 3);
    assert!(stderr_of(&out).contains("events"), "{}", stderr_of(&out));
}

#[test]
fn monte_carlo_smoke_grid_round_trips_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let json_a = dir.path().join("mc_a.json");
    let json_b = dir.path().join("mc_b.json");
    let csv = dir.path().join("mc.csv");
    for json in [&json_a, &json_b] {
        let out = calib(&[
            "montecarlo",
            "--base-seed",
            "9",
            "--runs-per-cell",
            "4",
            "--n-arrays",
            "3",
            "--sigma-tdoa-ms",
            "0.1",
            "--sigma-doa-deg",
            "10",
            "--trajectories",
            "traj1",
            "--output",
            json.to_str().unwrap(),
            "--csv",
            csv.to_str().unwrap(),
        ]);
        assert_code(&out, 0);
    }
    assert_eq!(
        fs::read_to_string(&json_a).unwrap(),
        fs::read_to_string(&json_b).unwrap()
    );
    let csv_text = fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("stage,trajectory,sigma_tdoa_ms"));
    assert_eq!(csv_text.lines().count(), 3);

    let out = calib(&["report", "--input", json_a.to_str().unwrap()]);
    assert_code(&out, 0);
    assert_eq!(String::from_utf8_lossy(&out.stdout), csv_text);
}

#[test]
fn monte_carlo_rejects_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = calib(&[
        "montecarlo",
        "--runs-per-cell",
        "2",
        "--output",
        dir.path().join("mc.json").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
}
