//! Offline determination of the sensing parameters (view count, robot
//! speed, capture interval) for one object type.
//!
//! The sweep moves the sensor along random arcs over an eighth-sphere above
//! the pile, capturing a dense stream at the base interval; coarser
//! intervals are evaluated by subsampling that stream, so one physical pass
//! serves every interval. Each `(path, v, t, n)` combination runs through
//! fusion and recognition, and the recognized-object count drives a
//! three-step selection: filter counts by a sigma band, keep the most
//! frequent view count, then take the fastest speed.

use nalgebra::{Point3, Vector3};
use rand::Rng;

use crate::cycle::{RecognitionConfig, RecognitionContext};
use crate::fusion::{self, FusionConfig, ViewSet};
use crate::geometry::{Intrinsics, Pose};
use crate::planner;
use crate::rng;
use crate::scene::{self, NoiseModel, Scene, SyncModel};

/// Sweep grids: speeds up to 80% every 10%, intervals up to 80 ms every
/// 10 ms, view counts limited to 10.
pub const SPEED_GRID: [f64; 8] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
pub const INTERVAL_GRID_MS: [u64; 8] = [10, 20, 30, 40, 50, 60, 70, 80];
pub const MAX_VIEWS: u32 = 10;
pub const SWEEP_PATHS: u32 = 10;
pub const CAPTURES_PER_PATH: usize = 50;
pub const BASE_INTERVAL_MS: u64 = 10;

/// One evaluated combination.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Trial {
    pub path_id: u32,
    pub v: f64,
    pub t_ms: u64,
    pub n: u32,
    pub recognized_count: u32,
}

/// Selected parameters with the derived coverage geometry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TunedParams {
    pub n: u32,
    pub v: f64,
    pub t_ms: u64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TunerConfig {
    /// Literal reading of the sigma filter: keep only counts whose
    /// deviation from the mean lies in [sigma, 2 sigma]. The default keeps
    /// everything within 2 sigma instead.
    pub strict_sigma_band: bool,
    pub working_distance: f64,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            strict_sigma_band: false,
            working_distance: 300.0,
        }
    }
}

/// Outcome of the selection with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub params: TunedParams,
    /// The sigma band left nothing; selection fell back to all trials.
    pub fallback_used: bool,
    pub survivors: usize,
}

/// Capture indices of the `t` interval emulated on the base-interval
/// stream: every `(t / base)`-th capture. `None` when the stream is too
/// short for `n` views.
pub fn subsample_indices(t_ms: u64, n: u32) -> Option<Vec<usize>> {
    debug_assert_eq!(t_ms % BASE_INTERVAL_MS, 0);
    let stride = (t_ms / BASE_INTERVAL_MS) as usize;
    let indices: Vec<usize> = (0..n as usize).map(|j| j * stride).collect();
    if indices.last().copied().unwrap_or(0) < CAPTURES_PER_PATH {
        Some(indices)
    } else {
        None
    }
}

/// Everything the sweep needs from the simulator.
#[derive(Debug, Clone)]
pub struct SweepEnv {
    pub scene: Scene,
    pub intrinsics: Intrinsics,
    pub noise: NoiseModel,
    pub sync: SyncModel,
    pub fusion: FusionConfig,
    pub recognition: RecognitionConfig,
    pub working_distance: f64,
}

/// A great-circle arc on the eighth-sphere above the pile center.
struct SweepPath {
    center: Point3<f64>,
    radius: f64,
    start: Vector3<f64>,
    /// In-plane second basis vector of the great circle.
    side: Vector3<f64>,
}

impl SweepPath {
    /// Sensor pose after sweeping `angle` radians from the start, facing
    /// the pile center.
    fn pose_at(&self, angle: f64) -> Pose {
        let dir = self.start * angle.cos() + self.side * angle.sin();
        let location = self.center + dir * self.radius;
        let z_axis = (self.center - location).normalize();
        let tangent = -self.start * angle.sin() + self.side * angle.cos();
        let x_axis = (tangent - z_axis * tangent.dot(&z_axis)).normalize();
        let y_axis = z_axis.cross(&x_axis);
        Pose::from_parts(
            nalgebra::Matrix3::from_columns(&[x_axis, y_axis, z_axis]),
            location.coords,
        )
    }
}

/// Random unit vector in the upper octant (x, y, z > 0).
fn octant_direction<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

fn make_path<R: Rng>(env: &SweepEnv, rng: &mut R) -> SweepPath {
    let center = pile_center(&env.scene);
    let start = octant_direction(rng);
    let mut other = octant_direction(rng);
    // Gram-Schmidt; resample until the two directions span a plane.
    loop {
        let side = other - start * other.dot(&start);
        if side.norm() > 1e-3 {
            return SweepPath {
                center,
                radius: env.working_distance,
                start,
                side: side.normalize(),
            };
        }
        other = octant_direction(rng);
    }
}

fn pile_center(scene: &Scene) -> Point3<f64> {
    if scene.objects.is_empty() {
        return scene.bin.center();
    }
    let mut acc = Vector3::zeros();
    for o in &scene.objects {
        acc += o.center().coords;
    }
    Point3::from(acc / scene.objects.len() as f64)
}

/// Runs the full offline sweep: `SWEEP_PATHS` random arcs, each traversed
/// at every grid speed while capturing `CAPTURES_PER_PATH` images at the
/// base interval; every feasible `(t, n)` is then evaluated by subsampling.
pub fn run_sweep(env: &SweepEnv, seed: u64) -> Vec<Trial> {
    let mut trials = Vec::new();
    for path_id in 0..SWEEP_PATHS {
        let mut path_rng = rng::substream(seed, "sweep-path", &[u64::from(path_id)]);
        let path = make_path(env, &mut path_rng);
        for (v_idx, &v) in SPEED_GRID.iter().enumerate() {
            // Physical pass: 50 captures at the base interval while moving
            // at speed v (v mm/ms over the sphere radius).
            let omega = v / env.working_distance; // rad per ms
            let noise_seed = rng::mix(seed, "sweep-noise", &[u64::from(path_id), v_idx as u64]);
            let sync_seed = rng::mix(seed, "sweep-sync", &[u64::from(path_id), v_idx as u64]);
            let pose_fn = |t_s: f64| path.pose_at(omega * t_s * 1000.0);
            let mut captures = Vec::with_capacity(CAPTURES_PER_PATH);
            for j in 0..CAPTURES_PER_PATH {
                let t_ms = (j as u64 * BASE_INTERVAL_MS) as f64;
                let true_pose = path.pose_at(omega * t_ms);
                let buffers = scene::render_buffers(&env.scene, &true_pose, &env.intrinsics);
                let noisy = scene::apply_noise_with_susceptibility(
                    &buffers.depth,
                    &buffers.normals,
                    Some(&buffers.susceptibility),
                    &env.noise,
                    j as u64,
                    noise_seed,
                );
                // The sweep never stops the robot, so every report juggles
                // the same latency jitter the picking cycles see.
                let reported = scene::report_kinematics(
                    &pose_fn,
                    t_ms / 1000.0,
                    false,
                    &env.sync,
                    sync_seed,
                    j as u64,
                );
                captures.push((noisy, reported));
            }
            // The reference capture (index 0) anchors recognition; cache
            // its ideal render across all (t, n) combinations.
            let reference_pose = captures[0].1;
            let mut context =
                RecognitionContext::new(&env.scene, reference_pose, env.intrinsics);
            for &t_ms in &INTERVAL_GRID_MS {
                for n in 1..=MAX_VIEWS {
                    let Some(indices) = subsample_indices(t_ms, n) else {
                        continue;
                    };
                    let views: Vec<_> =
                        indices.iter().map(|&j| captures[j].clone()).collect();
                    let set = ViewSet::new(views, env.intrinsics, 0)
                        .expect("sweep views are consistent");
                    let fused = fusion::fuse(&set, &env.fusion);
                    let recognized = context.recognize(&fused, &env.recognition);
                    trials.push(Trial {
                        path_id,
                        v,
                        t_ms,
                        n,
                        recognized_count: recognized.len() as u32,
                    });
                }
            }
        }
    }
    trials
}

fn derived_coverage(n: u32, v: f64, t_ms: u64, working_distance: f64) -> (f64, f64) {
    if n >= 2 {
        planner::coverage_from_params(n, t_ms as f64, v, working_distance)
    } else {
        (0.0, 0.0)
    }
}

/// Applies the three-step selection rule. All tie-breaks are value-based,
/// so the outcome is invariant to the order of the trial list.
pub fn select_parameters(trials: &[Trial], cfg: &TunerConfig) -> Selection {
    assert!(!trials.is_empty(), "selection needs at least one trial");
    let counts: Vec<f64> = trials.iter().map(|t| f64::from(t.recognized_count)).collect();
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / counts.len() as f64;
    let sigma = var.sqrt();

    let in_band = |count: u32| {
        let dev = (f64::from(count) - mean).abs();
        if cfg.strict_sigma_band {
            sigma <= dev && dev <= 2.0 * sigma
        } else {
            dev <= 2.0 * sigma
        }
    };
    let mut survivors: Vec<&Trial> = trials.iter().filter(|t| in_band(t.recognized_count)).collect();
    let mut fallback_used = false;
    if survivors.is_empty() {
        log::warn!("sigma-band filter left no trials; selecting from the unfiltered list");
        survivors = trials.iter().collect();
        fallback_used = true;
    }
    let survivor_count = survivors.len();

    // Most frequent n, ties to the smaller value.
    let mut n_freq: std::collections::BTreeMap<u32, usize> = Default::default();
    for t in &survivors {
        *n_freq.entry(t.n).or_insert(0) += 1;
    }
    let mode_n = n_freq
        .iter()
        .max_by(|(na, ca), (nb, cb)| ca.cmp(cb).then(nb.cmp(na)))
        .map(|(n, _)| *n)
        .expect("non-empty survivors");

    // Fastest speed; ties prefer the larger interval, then fewer views
    // (the view count is already pinned by the mode).
    let best = survivors
        .iter()
        .filter(|t| t.n == mode_n)
        .max_by(|a, b| {
            a.v.partial_cmp(&b.v)
                .expect("speeds are finite")
                .then(a.t_ms.cmp(&b.t_ms))
                .then(b.n.cmp(&a.n))
        })
        .expect("mode class is non-empty");

    let (alpha, beta) = derived_coverage(best.n, best.v, best.t_ms, cfg.working_distance);
    Selection {
        params: TunedParams {
            n: best.n,
            v: best.v,
            t_ms: best.t_ms,
            alpha,
            beta,
        },
        fallback_used,
        survivors: survivor_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_scene, ObjectTemplate, SceneSpec, Shape};
    use approx::assert_relative_eq;

    #[test]
    fn subsample_uses_every_kth_capture() {
        assert_eq!(subsample_indices(10, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(subsample_indices(20, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        assert_eq!(subsample_indices(80, 7).unwrap(), vec![0, 8, 16, 24, 32, 40, 48]);
        // (8 - 1) * 8 = 56 >= 50: infeasible.
        assert!(subsample_indices(80, 8).is_none());
        assert_eq!(subsample_indices(10, 1).unwrap(), vec![0]);
    }

    fn mk(path_id: u32, n: u32, v: f64, t_ms: u64, count: u32) -> Trial {
        Trial {
            path_id,
            v,
            t_ms,
            n,
            recognized_count: count,
        }
    }

    #[test]
    fn unanimous_trials_select_themselves() {
        let trials: Vec<Trial> = (0..10).map(|p| mk(p, 4, 0.8, 30, 10)).collect();
        for strict in [false, true] {
            let cfg = TunerConfig {
                strict_sigma_band: strict,
                working_distance: 300.0,
            };
            let sel = select_parameters(&trials, &cfg);
            assert_eq!((sel.params.n, sel.params.v, sel.params.t_ms), (4, 0.8, 30));
            assert!(!sel.fallback_used);
            let (alpha, beta) =
                planner::coverage_from_params(4, 30.0, 0.8, 300.0);
            assert_relative_eq!(sel.params.alpha, alpha, epsilon = 1e-15);
            assert_relative_eq!(sel.params.beta, beta, epsilon = 1e-15);
        }
    }

    /// Planted optimum at (n = 3, v = 0.6): five good trials sit between
    /// one and two sigma above the mean, mediocre fillers hug the mean,
    /// and the fast-but-bad trials fall beyond two sigma below. Both
    /// sigma-band readings must recover the planted optimum.
    fn planted_trials() -> Vec<Trial> {
        let mut trials = Vec::new();
        for (i, v) in [0.2, 0.3, 0.4, 0.5, 0.6].iter().enumerate() {
            trials.push(mk(i as u32, 3, *v, 20, 12));
        }
        for i in 0..12u32 {
            trials.push(mk(i, 4 + (i % 4), 0.1 + 0.1 * f64::from(i % 3), 10, 8));
        }
        trials.push(mk(0, 3, 0.7, 10, 0));
        trials.push(mk(1, 3, 0.8, 10, 0));
        trials
    }

    #[test]
    fn planted_optimum_is_recovered_under_both_band_readings() {
        let trials = planted_trials();
        // Verify the construction: good trials in [sigma, 2 sigma],
        // fillers inside sigma, bad beyond 2 sigma.
        let counts: Vec<f64> = trials.iter().map(|t| f64::from(t.recognized_count)).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let sigma =
            (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / counts.len() as f64).sqrt();
        assert!((12.0 - mean) >= sigma && (12.0 - mean) <= 2.0 * sigma);
        assert!((8.0 - mean).abs() < sigma);
        assert!((mean - 0.0) > 2.0 * sigma);

        for strict in [false, true] {
            let cfg = TunerConfig {
                strict_sigma_band: strict,
                working_distance: 300.0,
            };
            let sel = select_parameters(&trials, &cfg);
            assert_eq!(
                (sel.params.n, sel.params.v),
                (3, 0.6),
                "strict={strict}: {sel:?}"
            );
            assert!(!sel.fallback_used);
        }
    }

    #[test]
    fn selection_is_permutation_invariant() {
        let mut trials = planted_trials();
        let cfg = TunerConfig::default();
        let base = select_parameters(&trials, &cfg);
        trials.reverse();
        assert_eq!(select_parameters(&trials, &cfg), base);
        trials.swap(0, 7);
        trials.swap(3, 11);
        assert_eq!(select_parameters(&trials, &cfg), base);
    }

    #[test]
    fn empty_band_falls_back_to_unfiltered() {
        // Bulk at the mean (inside one sigma) plus two far outliers
        // (beyond two sigma): the strict band keeps nothing.
        let mut trials = Vec::new();
        for i in 0..5u32 {
            trials.push(mk(i, 3, 0.4, 20, 5));
            trials.push(mk(i, 5, 0.2, 20, 5));
        }
        trials.push(mk(10, 7, 0.1, 10, 4));
        trials.push(mk(11, 9, 0.1, 10, 6));
        let counts: Vec<f64> = trials.iter().map(|t| f64::from(t.recognized_count)).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let sigma =
            (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / counts.len() as f64).sqrt();
        assert!((5.0 - mean).abs() < sigma);
        assert!((4.0 - mean).abs() > 2.0 * sigma && (6.0 - mean).abs() > 2.0 * sigma);

        let strict = TunerConfig {
            strict_sigma_band: true,
            working_distance: 300.0,
        };
        let sel = select_parameters(&trials, &strict);
        assert!(sel.fallback_used);
        // Unfiltered: n = 3 and n = 5 tie at five trials each, smaller n
        // wins; fastest v among n = 3 is 0.4.
        assert_eq!((sel.params.n, sel.params.v), (3, 0.4));
    }

    #[test]
    fn speed_cliff_keeps_selected_speed_near_threshold() {
        // Counts strictly decrease above v* = 0.6, with a catastrophic
        // drop at 0.8 that lands beyond the two-sigma band.
        let mut trials = Vec::new();
        for path in 0..4u32 {
            for &v in &SPEED_GRID {
                let count = if v <= 0.6 {
                    10
                } else if v <= 0.7 {
                    9
                } else {
                    0
                };
                trials.push(mk(path, 4, v, 30, count));
            }
        }
        let counts: Vec<f64> = trials.iter().map(|t| f64::from(t.recognized_count)).collect();
        let mean = counts.iter().sum::<f64>() / counts.len() as f64;
        let sigma =
            (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / counts.len() as f64).sqrt();
        assert!(mean > 2.0 * sigma, "v = 0.8 trials must fall outside the band");

        let sel = select_parameters(&trials, &TunerConfig::default());
        assert!(
            sel.params.v <= 0.6 + 0.1 + 1e-12,
            "selected v {} more than one grid step past the cliff",
            sel.params.v
        );
    }

    #[test]
    fn output_stays_on_the_sweep_grids() {
        let trials = planted_trials();
        let sel = select_parameters(&trials, &TunerConfig::default());
        assert!(sel.params.n <= MAX_VIEWS);
        assert!(SPEED_GRID.iter().any(|v| (*v - sel.params.v).abs() < 1e-12));
        assert!(INTERVAL_GRID_MS.contains(&sel.params.t_ms));
    }

    fn tiny_env() -> SweepEnv {
        // One big central sphere: comfortably visible (and never marginal
        // against the coverage threshold) from every octant pose. The merge
        // threshold is sized to the sphere's per-pixel depth slope so that
        // reprojection quantization on the rim cannot push coverage under
        // the recognition threshold.
        let spec = SceneSpec {
            templates: vec![ObjectTemplate {
                shape: Shape::Sphere { radius: 40.0 },
                count: 1,
                dropout_susceptibility: 0.8,
            }],
            pile_radius: Some(1.0),
            ..SceneSpec::default()
        };
        let delta = 6.0;
        SweepEnv {
            scene: build_scene(&spec, 12).unwrap(),
            intrinsics: Intrinsics::new(90.0, 90.0, 32.0, 24.0, 64, 48),
            noise: NoiseModel::noiseless(),
            sync: SyncModel {
                latency_jitter: 0.0,
                speed: 0.5,
            },
            fusion: FusionConfig {
                delta,
                ..FusionConfig::default()
            },
            recognition: RecognitionConfig {
                tau: 0.5,
                delta,
                ..RecognitionConfig::default()
            },
            working_distance: 300.0,
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let env = tiny_env();
        let a = run_sweep(&env, 5);
        let b = run_sweep(&env, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), {
            // 10 paths x 8 speeds x sum over t of feasible n counts.
            let per_vt: usize = INTERVAL_GRID_MS
                .iter()
                .map(|&t| (1..=MAX_VIEWS).filter(|&n| subsample_indices(t, n).is_some()).count())
                .sum();
            10 * 8 * per_vt
        });
    }

    #[test]
    fn noise_free_sweep_hits_the_per_pose_ceiling() {
        // Without noise or jitter, every (t, n) combination of a given
        // (path, v) pass recognizes exactly what a noise-free single view
        // from the reference pose recognizes.
        let env = tiny_env();
        let trials = run_sweep(&env, 3);
        let mut by_pass: std::collections::BTreeMap<(u32, u64), Vec<&Trial>> = Default::default();
        for t in &trials {
            by_pass
                .entry((t.path_id, (t.v * 10.0).round() as u64))
                .or_default()
                .push(t);
        }
        for ((path, v10), group) in by_pass {
            let n1 = group
                .iter()
                .find(|t| t.n == 1 && t.t_ms == 10)
                .expect("n=1 trial exists");
            for t in &group {
                assert_eq!(
                    t.recognized_count, n1.recognized_count,
                    "path {path} v {v10}: {t:?} disagrees with the single-view ceiling"
                );
            }
        }
    }
}
