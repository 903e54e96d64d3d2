//! End-to-end tests of the `picksim` binary: exit codes, output files,
//! and determinism of the data products.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use picksim_core::depth::{DepthImage, DepthMeta};
use picksim_core::geometry::Intrinsics;
use picksim_core::scene::{self, overhead_pose, Bin, NoiseModel, Scene};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_picksim"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("picksim-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

fn small_experiment_toml() -> &'static str {
    r#"
schema = "picksim/v1"
repetitions = 2
strategy = "active_multiview"
seed = 7

[camera]
fx = 120.0
fy = 120.0
cx = 32.0
cy = 24.0
width = 64
height = 48

[scene]
pile_radius_mm = 40.0

[[scene.objects]]
shape = "sphere"
radius_mm = 12.0
count = 3
dropout_susceptibility = 0.8

[path]
views = 3
interval_ms = 30
speed = 0.7
"#
}

#[test]
fn simulate_writes_metrics_and_is_deterministic() {
    let dir = tmp_dir("simulate");
    let cfg = dir.join("exp.toml");
    write(&cfg, small_experiment_toml());

    let run = |out: &Path| -> Output {
        bin()
            .args(["simulate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap()
    };
    let out1 = dir.join("a");
    let out2 = dir.join("b");
    let r1 = run(&out1);
    assert!(r1.status.success(), "stderr: {}", String::from_utf8_lossy(&r1.stderr));
    let r2 = run(&out2);
    assert!(r2.status.success());

    let m1 = std::fs::read(out1.join("metrics.json")).unwrap();
    let m2 = std::fs::read(out2.join("metrics.json")).unwrap();
    assert_eq!(m1, m2, "metrics.json must be byte-identical for one seed");
    let c1 = std::fs::read(out1.join("cycles.csv")).unwrap();
    let c2 = std::fs::read(out2.join("cycles.csv")).unwrap();
    assert_eq!(c1, c2);
    assert!(String::from_utf8_lossy(&m1).contains("complete_rate"));
}

#[test]
fn simulate_dump_depth_writes_fused_images() {
    let dir = tmp_dir("dump");
    let cfg = dir.join("exp.toml");
    write(&cfg, small_experiment_toml());
    let out = dir.join("out");
    let r = bin()
        .args(["simulate", "--dump-depth", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success());
    let first = out.join("fused_r000_c000.pgm");
    assert!(first.exists(), "missing {}", first.display());
    assert!(DepthMeta::sidecar_path(&first).exists());
    let img = DepthImage::load_pgm(&first).unwrap();
    assert!(img.valid_count() > 0);
}

#[test]
fn simulate_missing_config_exits_2() {
    let r = bin()
        .args(["simulate", "--config", "/nonexistent/picksim.toml"])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn simulate_unknown_key_exits_2() {
    let dir = tmp_dir("unknown");
    let cfg = dir.join("exp.toml");
    write(&cfg, &format!("{}\nmystery_knob = 1\n", small_experiment_toml()));
    let r = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("mystery_knob") || err.contains("unknown"), "stderr: {err}");
}

#[test]
fn simulate_without_strategy_exits_2() {
    let dir = tmp_dir("nostrategy");
    let cfg = dir.join("exp.toml");
    write(
        &cfg,
        &small_experiment_toml().replace("strategy = \"active_multiview\"\n", ""),
    );
    let r = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn compare_emits_three_rows_and_p_values() {
    let dir = tmp_dir("compare");
    let cfg = dir.join("exp.toml");
    write(&cfg, small_experiment_toml());
    let out = dir.join("out");
    let r = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8_lossy(&r.stdout);
    for name in ["active_multiview", "single_view", "random_path_multiview"] {
        assert!(stdout.contains(name), "missing {name} in:\n{stdout}");
    }
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("compare.json")).unwrap()).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(json["p_vs_single_view"].is_number());
    // At the default (heavy-dropout) noise, multi-view active sensing
    // never loses to a single view on paired seeds.
    let active = rows[0]["complete_rate"].as_f64().unwrap();
    let single = rows[1]["complete_rate"].as_f64().unwrap();
    assert!(active >= single, "active {active} below single view {single}");
}

#[test]
fn compare_single_repetition_has_no_p_value() {
    let dir = tmp_dir("compare1");
    let cfg = dir.join("exp.toml");
    write(
        &cfg,
        &small_experiment_toml().replace("repetitions = 2", "repetitions = 1"),
    );
    let out = dir.join("out");
    let r = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("n/a"));
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("compare.json")).unwrap()).unwrap();
    assert!(json["p_vs_single_view"].is_null());
}

fn plane_views(dir: &Path, dropout: f64, count: usize) -> Vec<PathBuf> {
    let k = Intrinsics::new(120.0, 120.0, 32.0, 24.0, 64, 48);
    let scene = Scene {
        bin: Bin::default(),
        objects: vec![],
        rng_seed: 0,
    };
    let pose = overhead_pose(300.0);
    let buffers = scene::render_buffers(&scene, &pose, &k);
    let model = NoiseModel {
        sensor_accuracy: 1e-3,
        dropout_base: dropout,
        dropout_view_gain: 0.0,
        outlier_rate: 0.0,
        outlier_magnitude: 0.0,
        view_decorrelation: 1.0,
    };
    (0..count)
        .map(|v| {
            let noisy = scene::apply_noise(&buffers.depth, &buffers.normals, &model, v as u64, 5);
            let path = dir.join(format!("view{v}.pgm"));
            noisy.save_pgm(&path).unwrap();
            DepthMeta {
                intrinsics: k,
                pose,
            }
            .save(&path)
            .unwrap();
            path
        })
        .collect()
}

#[test]
fn fuse_single_input_reproduces_it_exactly() {
    let dir = tmp_dir("fuse1");
    let inputs = plane_views(&dir, 0.2, 1);
    let out = dir.join("out");
    let r = bin()
        .arg("fuse")
        .arg("--out")
        .arg(&out)
        .arg(&inputs[0])
        .output()
        .unwrap();
    assert!(r.status.success(), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let original = std::fs::read(&inputs[0]).unwrap();
    let fused = std::fs::read(out.join("fused.pgm")).unwrap();
    assert_eq!(original, fused, "single-view fusion must be the identity");
}

#[test]
fn fuse_four_views_fills_holes_to_the_independence_bound() {
    let dir = tmp_dir("fuse4");
    let p = 0.3;
    let inputs = plane_views(&dir, p, 4);
    let out = dir.join("out");
    let mut cmd = bin();
    cmd.arg("fuse").arg("--out").arg(&out);
    for input in &inputs {
        cmd.arg(input);
    }
    let r = cmd.output().unwrap();
    assert!(r.status.success());
    let fused = DepthImage::load_pgm(&out.join("fused.pgm")).unwrap();
    let n = fused.len() as f64;
    let p4 = p.powi(4);
    let bound = p4 + 3.0 * (p4 * (1.0 - p4) / n).sqrt();
    assert!(
        fused.invalid_fraction() <= bound,
        "invalid fraction {} above the independence bound {bound}",
        fused.invalid_fraction()
    );
    let diag: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("fuse_diagnostics.json")).unwrap()).unwrap();
    assert!(diag["votes_histogram"].is_array());
}

#[test]
fn fuse_truncated_pgm_exits_2() {
    let dir = tmp_dir("fusetrunc");
    let inputs = plane_views(&dir, 0.1, 1);
    let mut bytes = std::fs::read(&inputs[0]).unwrap();
    bytes.truncate(bytes.len() - 10);
    std::fs::write(&inputs[0], bytes).unwrap();
    let r = bin()
        .arg("fuse")
        .arg("--out")
        .arg(dir.join("out"))
        .arg(&inputs[0])
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn fuse_without_inputs_fails_fast() {
    let r = bin().arg("fuse").output().unwrap();
    assert_eq!(r.status.code(), Some(2));
}

fn small_tune_toml() -> &'static str {
    r#"
schema = "picksim/v1"
seed = 3

[camera]
fx = 80.0
fy = 80.0
cx = 20.0
cy = 15.0
width = 40
height = 30

[scene]
pile_radius_mm = 30.0

[[scene.objects]]
shape = "sphere"
radius_mm = 25.0
count = 1
dropout_susceptibility = 0.8

[noise]
sensor_accuracy_mm = 1e-6
dropout_base = 0.0
dropout_view_gain = 0.0
outlier_rate = 0.0
outlier_magnitude_mm = 0.0
view_decorrelation = 1.0

[sync]
latency_jitter_s = 0.0

[fusion]
delta_mm = 6.0
"#
}

#[test]
fn tune_is_deterministic_and_noise_free_selects_max_speed() {
    let dir = tmp_dir("tune");
    let cfg = dir.join("tune.toml");
    write(&cfg, small_tune_toml());
    let run = |out: &Path| -> Output {
        bin()
            .args(["tune", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap()
    };
    let out1 = dir.join("a");
    let out2 = dir.join("b");
    let r1 = run(&out1);
    assert!(r1.status.success(), "stderr: {}", String::from_utf8_lossy(&r1.stderr));
    let r2 = run(&out2);
    assert!(r2.status.success());
    assert_eq!(
        std::fs::read(out1.join("tuning.csv")).unwrap(),
        std::fs::read(out2.join("tuning.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(out1.join("tuned_params.json")).unwrap(),
        std::fs::read(out2.join("tuned_params.json")).unwrap()
    );
    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out1.join("tuned_params.json")).unwrap()).unwrap();
    // A flat (noise-free) response surface keeps every trial, so the
    // most frequent view count is the smallest and the speed maxes out.
    assert_eq!(json["selected"]["v"].as_f64().unwrap(), 0.8);
}

#[test]
fn tune_invalid_working_distance_exits_2() {
    let dir = tmp_dir("tunebad");
    let cfg = dir.join("tune.toml");
    write(
        &cfg,
        &format!("{}\nworking_distance_mm = -5.0\n", small_tune_toml()),
    );
    let r = bin().args(["tune", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(r.status.code(), Some(2));
}
