//! On-disk configuration for the CLI.
//!
//! Configs are TOML with a versioned `schema` key. Unknown keys are hard
//! errors (a typo must never silently fall back to a default), and angles
//! cross this boundary in degrees while everything internal uses radians.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use serde::Deserialize;
use thiserror::Error;

use crate::cycle::{CycleConfig, ExperimentSetup, RecognitionConfig, Strategy};
use crate::fusion::FusionConfig;
use crate::geometry::Intrinsics;
use crate::planner::PathParams;
use crate::scene::{Bin, NoiseModel, ObjectTemplate, SceneSpec, Shape, SyncModel};
use crate::tuner::{SweepEnv, TunerConfig};

pub const SCHEMA: &str = "picksim/v1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn default_seed() -> u64 {
    0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fx: 220.0,
            fy: 220.0,
            cx: 80.0,
            cy: 60.0,
            width: 160,
            height: 120,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinConfig {
    pub length_mm: f64,
    pub width_mm: f64,
    pub wall_height_mm: f64,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            length_mm: 500.0,
            width_mm: 250.0,
            wall_height_mm: 150.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectConfig {
    pub shape: String,
    pub count: u32,
    #[serde(default)]
    pub radius_mm: Option<f64>,
    #[serde(default)]
    pub extents_mm: Option<[f64; 3]>,
    #[serde(default)]
    pub height_mm: Option<f64>,
    pub dropout_susceptibility: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default)]
    pub bin: BinConfig,
    #[serde(default)]
    pub objects: Vec<ObjectConfig>,
    #[serde(default = "default_max_rejections")]
    pub max_rejections: usize,
    /// Concentrates placement near the bin center (dumped-heap piles).
    #[serde(default)]
    pub pile_radius_mm: Option<f64>,
}

fn default_max_rejections() -> usize {
    10_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sensor_accuracy_mm: f64,
    pub dropout_base: f64,
    pub dropout_view_gain: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude_mm: f64,
    pub view_decorrelation: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let m = NoiseModel::default();
        Self {
            sensor_accuracy_mm: m.sensor_accuracy,
            dropout_base: m.dropout_base,
            dropout_view_gain: m.dropout_view_gain,
            outlier_rate: m.outlier_rate,
            outlier_magnitude_mm: m.outlier_magnitude,
            view_decorrelation: m.view_decorrelation,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    pub latency_jitter_s: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            latency_jitter_s: SyncModel::default().latency_jitter,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub views: u32,
    pub interval_ms: u64,
    /// Fraction of 1 m/s.
    pub speed: f64,
    #[serde(default = "default_gamma_deg")]
    pub gamma_deg: f64,
    #[serde(default = "default_working_distance")]
    pub working_distance_mm: f64,
}

fn default_gamma_deg() -> f64 {
    5.0
}

fn default_working_distance() -> f64 {
    300.0
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            views: 4,
            interval_ms: 30,
            speed: 0.7,
            gamma_deg: default_gamma_deg(),
            working_distance_mm: default_working_distance(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionFileConfig {
    /// Merge threshold; defaults to twice the sensor accuracy.
    #[serde(default)]
    pub delta_mm: Option<f64>,
    #[serde(default = "default_true")]
    pub icp_enabled: bool,
    #[serde(default = "default_icp_iterations")]
    pub icp_max_iterations: usize,
    #[serde(default = "default_icp_convergence")]
    pub icp_convergence_mm: f64,
    #[serde(default = "default_min_votes")]
    pub min_votes: u32,
    #[serde(default = "default_icp_subsample")]
    pub icp_subsample: usize,
}

fn default_icp_iterations() -> usize {
    10
}

fn default_icp_convergence() -> f64 {
    0.05
}

fn default_min_votes() -> u32 {
    1
}

fn default_icp_subsample() -> usize {
    16
}

impl Default for FusionFileConfig {
    fn default() -> Self {
        Self {
            delta_mm: None,
            icp_enabled: true,
            icp_max_iterations: default_icp_iterations(),
            icp_convergence_mm: default_icp_convergence(),
            min_votes: default_min_votes(),
            icp_subsample: default_icp_subsample(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognitionFileConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_max_occlusion")]
    pub max_occlusion: f64,
}

fn default_tau() -> f64 {
    0.6
}

fn default_max_occlusion() -> f64 {
    0.5
}

impl Default for RecognitionFileConfig {
    fn default() -> Self {
        Self {
            tau: default_tau(),
            max_occlusion: default_max_occlusion(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotConfig {
    pub drop_point_mm: [f64; 3],
    pub lift_clearance_mm: f64,
    pub place_duration_ms: f64,
    #[serde(default)]
    pub grasp_failure_rate: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            drop_point_mm: [500.0, 0.0, 150.0],
            lift_clearance_mm: 100.0,
            place_duration_ms: 2000.0,
            grasp_failure_rate: 0.0,
        }
    }
}

/// Config for `simulate` and `compare`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub repetitions: u32,
    /// Strategy for `simulate`; `compare` runs all three regardless.
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub sync: SyncConfig,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub fusion: FusionFileConfig,
    #[serde(default)]
    pub recognition: RecognitionFileConfig,
    #[serde(default)]
    pub robot: RobotConfig,
}

/// Config for `tune`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub schema: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub camera: CameraConfig,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub sync: SyncConfig,
    #[serde(default)]
    pub fusion: FusionFileConfig,
    #[serde(default)]
    pub recognition: RecognitionFileConfig,
    #[serde(default = "default_working_distance")]
    pub working_distance_mm: f64,
    #[serde(default)]
    pub strict_sigma_band: bool,
}

/// Config for `fuse`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseConfig {
    pub schema: String,
    #[serde(default)]
    pub fusion: FusionFileConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: display.clone(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: display,
        // toml errors carry line/column positions in their Display form.
        message: e.to_string(),
    })
}

fn check_schema(path: &Path, schema: &str) -> Result<(), ConfigError> {
    if schema != SCHEMA {
        return Err(ConfigError::Invalid {
            path: path.display().to_string(),
            message: format!("schema {schema:?} is not supported (expected {SCHEMA:?})"),
        });
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = parse(path)?;
        check_schema(path, &cfg.schema)?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let invalid = |message: String| ConfigError::Invalid {
            path: path.display().to_string(),
            message,
        };
        if self.repetitions == 0 {
            return Err(invalid("repetitions must be at least 1".into()));
        }
        if let Some(s) = &self.strategy {
            parse_strategy(s).map_err(invalid)?;
        }
        validate_common(
            &self.camera,
            &self.scene,
            &self.noise,
            Some(&self.path),
            path,
        )
    }

    pub fn strategy(&self) -> Option<Strategy> {
        self.strategy.as_deref().map(|s| parse_strategy(s).expect("validated"))
    }

    pub fn to_setup(&self, strategy: Strategy) -> ExperimentSetup {
        ExperimentSetup {
            scene_spec: scene_spec(&self.scene),
            cycle: self.to_cycle_config(),
            strategy,
            repetitions: self.repetitions,
        }
    }

    pub fn to_cycle_config(&self) -> CycleConfig {
        let noise = noise_model(&self.noise);
        let delta = self.fusion.delta_mm.unwrap_or(2.0 * noise.sensor_accuracy);
        CycleConfig {
            intrinsics: intrinsics(&self.camera),
            path: path_params(&self.path),
            noise,
            sync: SyncModel {
                latency_jitter: self.sync.latency_jitter_s,
                speed: self.path.speed,
            },
            fusion: fusion_config(&self.fusion, delta),
            recognition: RecognitionConfig {
                tau: self.recognition.tau,
                delta,
                max_occlusion: self.recognition.max_occlusion,
            },
            drop_point: Point3::new(
                self.robot.drop_point_mm[0],
                self.robot.drop_point_mm[1],
                self.robot.drop_point_mm[2],
            ),
            lift_clearance: self.robot.lift_clearance_mm,
            place_duration_ms: self.robot.place_duration_ms,
            grasp_failure_rate: self.robot.grasp_failure_rate,
        }
    }
}

impl TuneConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = parse(path)?;
        check_schema(path, &cfg.schema)?;
        validate_common(&cfg.camera, &cfg.scene, &cfg.noise, None, path)?;
        if cfg.working_distance_mm <= 0.0 {
            return Err(ConfigError::Invalid {
                path: path.display().to_string(),
                message: "working_distance_mm must be positive".into(),
            });
        }
        Ok(cfg)
    }

    pub fn to_sweep_env(&self) -> Result<SweepEnv, crate::scene::SceneError> {
        let noise = noise_model(&self.noise);
        let delta = self.fusion.delta_mm.unwrap_or(2.0 * noise.sensor_accuracy);
        Ok(SweepEnv {
            scene: crate::scene::build_scene(&scene_spec(&self.scene), self.seed)?,
            intrinsics: intrinsics(&self.camera),
            noise,
            sync: SyncModel {
                latency_jitter: self.sync.latency_jitter_s,
                speed: 0.5,
            },
            fusion: fusion_config(&self.fusion, delta),
            recognition: RecognitionConfig {
                tau: self.recognition.tau,
                delta,
                max_occlusion: self.recognition.max_occlusion,
            },
            working_distance: self.working_distance_mm,
        })
    }

    pub fn tuner_config(&self) -> TunerConfig {
        TunerConfig {
            strict_sigma_band: self.strict_sigma_band,
            working_distance: self.working_distance_mm,
        }
    }
}

impl FuseConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = parse(path)?;
        check_schema(path, &cfg.schema)?;
        Ok(cfg)
    }

    pub fn to_fusion_config(&self) -> FusionConfig {
        let delta = self
            .fusion
            .delta_mm
            .unwrap_or(2.0 * self.noise.sensor_accuracy_mm);
        fusion_config(&self.fusion, delta)
    }
}

pub fn parse_strategy(name: &str) -> Result<Strategy, String> {
    match name {
        "active_multiview" => Ok(Strategy::ActiveMultiview),
        "single_view" => Ok(Strategy::SingleView),
        "random_path_multiview" => Ok(Strategy::RandomPathMultiview),
        other => Err(format!(
            "unknown strategy {other:?} (expected active_multiview, single_view, or random_path_multiview)"
        )),
    }
}

fn validate_common(
    camera: &CameraConfig,
    scene: &SceneConfig,
    noise: &NoiseConfig,
    path_cfg: Option<&PathConfig>,
    path: &Path,
) -> Result<(), ConfigError> {
    let invalid = |message: String| ConfigError::Invalid {
        path: path.display().to_string(),
        message,
    };
    if camera.fx <= 0.0 || camera.fy <= 0.0 {
        return Err(invalid("camera focal lengths must be positive".into()));
    }
    if camera.cx < 0.0
        || camera.cx >= f64::from(camera.width)
        || camera.cy < 0.0
        || camera.cy >= f64::from(camera.height)
    {
        return Err(invalid("camera principal point must lie inside the image".into()));
    }
    if noise.sensor_accuracy_mm <= 0.0 {
        return Err(invalid("noise.sensor_accuracy_mm must be positive".into()));
    }
    for p in [
        noise.dropout_base,
        noise.dropout_view_gain.min(1.0), // gain may exceed 1 by design
        noise.outlier_rate,
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid("noise probabilities must lie in [0, 1]".into()));
        }
    }
    for obj in &scene.objects {
        object_template(obj).map_err(&invalid)?;
    }
    if let Some(p) = path_cfg {
        if p.views == 0 {
            return Err(invalid("path.views must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&p.speed) || p.speed == 0.0 {
            return Err(invalid("path.speed must lie in (0, 1]".into()));
        }
        if p.interval_ms == 0 {
            return Err(invalid("path.interval_ms must be positive".into()));
        }
    }
    Ok(())
}

fn object_template(obj: &ObjectConfig) -> Result<ObjectTemplate, String> {
    let shape = match obj.shape.as_str() {
        "sphere" => Shape::Sphere {
            radius: obj
                .radius_mm
                .ok_or_else(|| "sphere objects need radius_mm".to_string())?,
        },
        "box" => {
            let e = obj
                .extents_mm
                .ok_or_else(|| "box objects need extents_mm".to_string())?;
            Shape::Box {
                half_extents: Vector3::new(e[0] / 2.0, e[1] / 2.0, e[2] / 2.0),
            }
        }
        "cylinder" => Shape::Cylinder {
            radius: obj
                .radius_mm
                .ok_or_else(|| "cylinder objects need radius_mm".to_string())?,
            half_height: obj
                .height_mm
                .ok_or_else(|| "cylinder objects need height_mm".to_string())?
                / 2.0,
        },
        other => return Err(format!("unknown shape {other:?}")),
    };
    match shape {
        Shape::Sphere { radius } if radius <= 0.0 => {
            return Err("sphere radius must be positive".into())
        }
        Shape::Cylinder { radius, half_height } if radius <= 0.0 || half_height <= 0.0 => {
            return Err("cylinder dimensions must be positive".into())
        }
        Shape::Box { half_extents } if half_extents.min() <= 0.0 => {
            return Err("box extents must be positive".into())
        }
        _ => {}
    }
    if !(0.0..=1.0).contains(&obj.dropout_susceptibility) {
        return Err("dropout_susceptibility must lie in [0, 1]".into());
    }
    Ok(ObjectTemplate {
        shape,
        count: obj.count,
        dropout_susceptibility: obj.dropout_susceptibility,
    })
}

pub fn scene_spec(cfg: &SceneConfig) -> SceneSpec {
    SceneSpec {
        bin: Bin {
            half_x: cfg.bin.length_mm / 2.0,
            half_y: cfg.bin.width_mm / 2.0,
            wall_height: cfg.bin.wall_height_mm,
        },
        templates: cfg
            .objects
            .iter()
            .map(|o| object_template(o).expect("validated at load"))
            .collect(),
        max_rejections: cfg.max_rejections,
        pile_radius: cfg.pile_radius_mm,
    }
}

pub fn intrinsics(cfg: &CameraConfig) -> Intrinsics {
    Intrinsics::new(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.width, cfg.height)
}

pub fn noise_model(cfg: &NoiseConfig) -> NoiseModel {
    NoiseModel {
        sensor_accuracy: cfg.sensor_accuracy_mm,
        dropout_base: cfg.dropout_base,
        dropout_view_gain: cfg.dropout_view_gain,
        outlier_rate: cfg.outlier_rate,
        outlier_magnitude: cfg.outlier_magnitude_mm,
        view_decorrelation: cfg.view_decorrelation,
    }
}

pub fn path_params(cfg: &PathConfig) -> PathParams {
    PathParams::new(
        cfg.views,
        cfg.interval_ms,
        cfg.speed,
        cfg.gamma_deg.to_radians(),
        cfg.working_distance_mm,
    )
}

fn fusion_config(cfg: &FusionFileConfig, delta: f64) -> FusionConfig {
    FusionConfig {
        delta,
        icp_enabled: cfg.icp_enabled,
        icp_max_iterations: cfg.icp_max_iterations,
        icp_convergence: cfg.icp_convergence_mm,
        min_votes: cfg.min_votes,
        icp_subsample: cfg.icp_subsample,
    }
}
