use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn facefit(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_facefit"))
        .args(args)
        .arg("--output-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = facefit(dir, args);
    assert!(
        out.status.success(),
        "facefit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn strip_nulls(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.retain(|_, x| !x.is_null());
            m.values_mut().for_each(strip_nulls);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn synth_asset_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["synth-asset", "--seed", "5"]);
    ok(b.path(), &["synth-asset", "--seed", "5"]);
    for f in ["asset.json", "prior.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["synth-asset", "--seed", "6"]);
    assert_ne!(fs::read(a.path().join("asset.json")).unwrap(), fs::read(c.path().join("asset.json")).unwrap());
}

#[test]
fn asset_header_reports_default_dimensions() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth-asset"]);
    let v = json(&d.path().join("asset.json"));
    let h = &v["header"];
    assert_eq!(h["vertex_count"], 602);
    assert_eq!(h["n_beta"], 16);
    assert_eq!(h["n_psi"], 24);
    assert_eq!(h["joint_count"], 4);
    assert_eq!(v["meta"]["seed"], 0);
    assert_eq!(v["meta"]["config"]["asset"]["rings"], 21);
}

#[test]
fn observation_header_matches_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "[scene]\nframes = 3\ncameras = 2\n");
    ok(d.path(), &["synth-asset", "--config", &cfg]);
    ok(d.path(), &["synth-obs", "--config", &cfg, "--seed", "2"]);
    let v = json(&d.path().join("observations.json"));
    assert_eq!(v["header"]["frames"], 3);
    assert_eq!(v["header"]["cameras"], 2);
    assert_eq!(v["header"]["landmarks"], 320);
    assert_eq!(v["header"]["records"], 3 * 2 * 320);
    assert_eq!(v["meta"]["seed"], 2);
    let truth = json(&d.path().join("ground_truth.json"));
    assert_eq!(truth["format"], "facefit-parameters");
    assert_eq!(truth["header"]["frames"], 3);
}

#[test]
fn synth_obs_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(d.path(), &["synth-asset", "--seed", "1"]);
        ok(d.path(), &["synth-obs", "--seed", "1"]);
    }
    for f in ["observations.json", "ground_truth.json", "rig.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn noiseless_round_trip_reaches_zero_energy() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        r#"
seed = 3
[noise.scale]
kind = "none"
[energy]
temporal = false
intersect = false
[energy.weights]
identity = 0.0
expression = 0.0
joints = 0.0
temporal = 0.0
intersect = 0.0
[solve]
gradient_tolerance = 0.0
step_tolerance = 1e-15
energy_tolerance = 0.0
max_iterations = 100
[fit]
init = "perturbed"
"#,
    );
    ok(d.path(), &["synth-asset", "--config", &cfg]);
    ok(d.path(), &["synth-obs", "--config", &cfg]);
    ok(d.path(), &["fit", "--config", &cfg, "--workers", "2"]);
    let report = json(&d.path().join("report.json"));
    let e = report["data"]["final_energy"].as_f64().unwrap();
    assert!(e < 1e-18, "final energy {e}");
    assert_eq!(report["meta"]["seed"], 3);
    let mesh = fs::read_to_string(d.path().join("meshes/frame_0000.obj")).unwrap();
    assert!(mesh.starts_with("# facefit seed 3"));
    assert_eq!(mesh.lines().filter(|l| l.starts_with("v ")).count(), 602);

    ok(d.path(), &["eval", "--config", &cfg]);
    let m = json(&d.path().join("metrics.json"));
    assert!(m["data"]["vertex_rmse"].as_f64().unwrap() < 1e-4);
    assert!(m["data"]["reprojection_rmse"].as_f64().unwrap() < 1e-6);
}

#[test]
fn fit_from_embedded_config_reproduces_parameters() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth-asset"]);
    ok(d.path(), &["synth-obs", "--seed", "4"]);
    ok(d.path(), &["fit", "--seed", "4", "--mode", "tracking"]);
    let first = fs::read(d.path().join("fit.json")).unwrap();
    let v = json(&d.path().join("fit.json"));
    assert_eq!(v["meta"]["config"]["solve"]["mode"], "tracking");
    // replay from the embedded configuration
    let mut config = v["meta"]["config"].clone();
    strip_nulls(&mut config);
    let embedded: toml::Value = serde_json::from_value(config).unwrap();
    let cfg = write_config(d.path(), &toml::to_string(&embedded).unwrap());
    ok(d.path(), &["fit", "--config", &cfg]);
    assert_eq!(first, fs::read(d.path().join("fit.json")).unwrap());
}

#[test]
fn eval_of_truth_against_itself_is_zero() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth-asset"]);
    ok(d.path(), &["synth-obs"]);
    let cfg = write_config(d.path(), "[paths]\nparameters = \"ground_truth.json\"\n");
    ok(d.path(), &["eval", "--config", &cfg]);
    let m = json(&d.path().join("metrics.json"))["data"].clone();
    assert!(m["vertex_rmse"].as_f64().unwrap() < 1e-12);
    assert_eq!(m["parameters"]["beta_norm"], 0.0);
}

#[test]
fn missing_inputs_and_bad_configs_fail() {
    let d = tempfile::tempdir().unwrap();
    let out = facefit(d.path(), &["fit"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    let cfg = write_config(d.path(), "[solve]\ndamping_up = 0.5\n");
    assert!(!facefit(d.path(), &["synth-asset", "--config", &cfg]).status.success());
    let cfg = write_config(d.path(), "unknown_key = 1\n");
    assert!(!facefit(d.path(), &["synth-asset", "--config", &cfg]).status.success());
}

#[test]
fn solver_errors_give_nonzero_exit() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth-asset"]);
    ok(d.path(), &["synth-obs"]);
    // everything fixed except a non-finite start
    let truth = json(&d.path().join("ground_truth.json"));
    let mut bad = truth.clone();
    bad["data"]["beta"][0] = Value::from(1e308);
    bad["data"]["beta"][1] = Value::from(-1e308);
    fs::write(d.path().join("bad.json"), serde_json::to_string(&bad).unwrap()).unwrap();
    let cfg = write_config(d.path(), "[paths]\ninit = \"bad.json\"\n[fit]\ninit = \"file\"\n");
    let out = facefit(d.path(), &["fit", "--config", &cfg]);
    assert!(!out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn bench_writes_csv_with_phase_columns() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(
        d.path(),
        "[bench]\nlandmarks = [20, 40]\nthresholds = [0.0]\nrepetitions = 1\nwarmup = 0\nframes = 1\niterations = 2\ntracking_frames = 3\ntracking_landmarks = 40\n[bench.asset]\nrings = 10\nsegments = 14\nn_beta = 6\nn_psi = 8\nlandmarks = 40\n",
    );
    ok(d.path(), &["bench", "--config", &cfg, "--workers", "1"]);
    let text = fs::read_to_string(d.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(lines[0].contains("accumulation") && lines[0].contains("factorization") && lines[0].contains("per_frame"));
    assert_eq!(lines.len(), 1 + 2 + 1);
    assert!(text.starts_with("# facefit seed 0"));
    assert!(d.path().join("bench.summary.csv").is_file());
}
