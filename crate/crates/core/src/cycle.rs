//! Discrete-event orchestration of the picking cycle and the experiment
//! harness.
//!
//! A cycle runs the workflow end to end: capture views along the sensing
//! path while the arm leaves the bin (the first view at the momentary
//! pull-up stop, so its pose is exact), fuse, recognize what remains on
//! top of the pile, grasp the best candidate, and plan the next cycle's
//! sensing path around the confidence-weighted center of what is left.
//! Sensing time is charged to takt only where it exceeds the place action.
//!
//! Besides the active multi-view strategy, the harness runs two baselines
//! for comparison: single-view sensing, and multi-view sensing aimed at a
//! random point instead of the weighted center.

use nalgebra::Point3;
use serde::Serialize;

use crate::depth::DepthImage;
use crate::fusion::{self, FusionConfig, FusionDiagnostics, ViewSet};
use crate::geometry::{Intrinsics, Pose};
use crate::planner::{
    self, PathParams, PlannerError, RecognizedObject, SensingPath,
};
use crate::rng;
use crate::scene::{self, HitKind, NoiseModel, Scene, SceneSpec, SyncModel};
use crate::timing::{self, TaktAccount, TimingBreakdown};

/// Sensing strategy under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    ActiveMultiview,
    SingleView,
    RandomPathMultiview,
}

impl Strategy {
    pub fn all() -> [Strategy; 3] {
        [
            Strategy::ActiveMultiview,
            Strategy::SingleView,
            Strategy::RandomPathMultiview,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ActiveMultiview => "active_multiview",
            Strategy::SingleView => "single_view",
            Strategy::RandomPathMultiview => "random_path_multiview",
        }
    }
}

/// Thresholds of the coverage-based recognizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognitionConfig {
    /// Minimum surviving-coverage fraction.
    pub tau: f64,
    /// Depth agreement tolerance against the ideal render, mm.
    pub delta: f64,
    /// An object occluded by others beyond this fraction is not "on top".
    pub max_occlusion: f64,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        Self {
            tau: 0.6,
            delta: 2.0,
            max_occlusion: 0.5,
        }
    }
}

/// Reusable recognition state for one (scene, reference pose) pair: the
/// noise-free reference render and the on-top occlusion counts are computed
/// once and shared across repeated calls (the tuner evaluates many fused
/// images against the same reference).
/// Visible pixels of one object: `(x, y, ideal depth)`.
type VisiblePixels = Vec<(u32, u32, f64)>;

pub struct RecognitionContext<'a> {
    scene: &'a Scene,
    pose: Pose,
    k: Intrinsics,
    /// Per object: visible pixels in the reference render, id-ordered.
    visible: Vec<(u32, VisiblePixels)>,
    unoccluded_cache: std::collections::BTreeMap<u32, usize>,
}

impl<'a> RecognitionContext<'a> {
    pub fn new(scene: &'a Scene, pose: Pose, k: Intrinsics) -> Self {
        let ideal = scene::render_buffers(scene, &pose, &k);
        let mut per_object: std::collections::BTreeMap<u32, VisiblePixels> = Default::default();
        for (x, y, d) in ideal.depth.iter_valid() {
            if let HitKind::Object(id) = ideal.hits[ideal.depth.index(x, y)] {
                per_object.entry(id).or_default().push((x, y, d));
            }
        }
        Self {
            scene,
            pose,
            k,
            visible: per_object.into_iter().collect(),
            unoccluded_cache: Default::default(),
        }
    }

    /// Recognizes objects whose ideal visible surface survived fusion.
    ///
    /// Coverage is the fraction of an object's visible pixels whose fused
    /// depth is valid and within `delta` of the ideal depth. An object is
    /// recognized if coverage reaches `tau` and it is on top of the pile
    /// (not occluded beyond `max_occlusion` by other objects). Confidence
    /// is the coverage itself.
    pub fn recognize(&mut self, fused: &DepthImage, cfg: &RecognitionConfig) -> Vec<RecognizedObject> {
        let mut out = Vec::new();
        for (id, pixels) in &self.visible {
            if pixels.is_empty() {
                continue;
            }
            let matched = pixels
                .iter()
                .filter(|(x, y, d)| {
                    fused
                        .get(*x, *y)
                        .is_some_and(|fd| (fd - d).abs() <= cfg.delta)
                })
                .count();
            let coverage = matched as f64 / pixels.len() as f64;
            if coverage < cfg.tau {
                continue;
            }
            let (scene, pose, k) = (self.scene, self.pose, self.k);
            let unoccluded = *self.unoccluded_cache.entry(*id).or_insert_with(|| {
                scene::unoccluded_pixel_count(scene, *id, &pose, &k)
                    .expect("object exists in scene")
            });
            if unoccluded == 0 {
                continue;
            }
            let occluded_frac = 1.0 - (pixels.len() as f64 / unoccluded as f64).min(1.0);
            if occluded_frac > cfg.max_occlusion {
                continue;
            }
            let obj = self.scene.object(*id).expect("object exists in scene");
            out.push(RecognizedObject {
                id: *id,
                position: obj.center(),
                confidence: coverage,
            });
        }
        out
    }
}

/// One-shot recognition against a fresh reference render.
pub fn recognize(
    fused: &DepthImage,
    k: &Intrinsics,
    sensor_pose: &Pose,
    scene: &Scene,
    cfg: &RecognitionConfig,
) -> Vec<RecognizedObject> {
    RecognitionContext::new(scene, *sensor_pose, *k).recognize(fused, cfg)
}

/// Everything a cycle needs besides the evolving state.
#[derive(Debug, Clone)]
pub struct CycleConfig {
    pub intrinsics: Intrinsics,
    pub path: PathParams,
    pub noise: NoiseModel,
    pub sync: SyncModel,
    pub fusion: FusionConfig,
    pub recognition: RecognitionConfig,
    /// Fixed dropping location in the robot frame, mm.
    pub drop_point: Point3<f64>,
    /// Height of the lift-up point above the bin walls, mm.
    pub lift_clearance: f64,
    pub place_duration_ms: f64,
    /// Probability that a commanded grasp fails (stress knob; 0 = always
    /// succeeds, matching the deterministic default).
    pub grasp_failure_rate: f64,
}

impl CycleConfig {
    pub fn new(intrinsics: Intrinsics, path: PathParams) -> Self {
        Self {
            intrinsics,
            path,
            noise: NoiseModel::default(),
            sync: SyncModel::default(),
            fusion: FusionConfig::default(),
            recognition: RecognitionConfig::default(),
            drop_point: Point3::new(500.0, 0.0, 150.0),
            lift_clearance: 100.0,
            place_duration_ms: 2000.0,
            grasp_failure_rate: 0.0,
        }
    }
}

/// The straight robot motion from the sensing path's end to the drop point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroppingPath {
    pub from: Point3<f64>,
    pub to: Point3<f64>,
}

/// Evolving state across cycles.
#[derive(Debug, Clone)]
pub struct CycleState {
    pub scene: Scene,
    pub sensing_path: SensingPath,
    pub dropping_path: DroppingPath,
    /// Recognition result that produced the current sensing path.
    pub pending: Vec<RecognizedObject>,
    pub clock_ms: f64,
    pub cycle_index: u64,
    /// True when the current sensing path came from search mode.
    pub path_from_search: bool,
    search_index: u64,
}

impl CycleState {
    /// Initial state with the default overhead path over the bin center.
    pub fn initial(scene: Scene, cfg: &CycleConfig) -> Result<Self, PlannerError> {
        let center = scene.bin.center();
        let lift = Point3::new(
            center.x,
            center.y,
            scene.bin.wall_height + cfg.lift_clearance,
        );
        let path =
            planner::plan_sensing_path(&center, &center, &lift, &cfg.drop_point, &cfg.path)?;
        let dropping_path = DroppingPath {
            from: path.end_location(),
            to: path.drop_point,
        };
        Ok(Self {
            scene,
            sensing_path: path,
            dropping_path,
            pending: Vec::new(),
            clock_ms: 0.0,
            cycle_index: 0,
            path_from_search: false,
            search_index: 0,
        })
    }
}

/// Outcome of one cycle.
#[derive(Debug, Clone)]
pub struct CycleResult {
    pub recognized: Vec<RecognizedObject>,
    pub grasped_id: Option<u32>,
    pub breakdown: TimingBreakdown,
    pub takt: TaktAccount,
    /// The cycle ran on a search-mode path (recovering from a cycle that
    /// recognized nothing).
    pub search_triggered: bool,
    pub fusion_diagnostics: FusionDiagnostics,
    pub views_captured: u32,
    /// The fused depth image, in the reference view's frame.
    pub fused: DepthImage,
    /// The reference sensor pose in the robot frame (exact).
    pub reference_pose: Pose,
    /// The sensing path this cycle flew.
    pub sensing_path: SensingPath,
}

fn views_for(strategy: Strategy, params: &PathParams) -> u32 {
    match strategy {
        Strategy::SingleView => 1,
        _ => params.n,
    }
}

/// Path parameters a strategy actually flies: single-view collapses the
/// coverage angle to zero.
pub fn effective_path_params(strategy: Strategy, params: &PathParams) -> PathParams {
    match strategy {
        Strategy::SingleView => PathParams::new(
            1,
            params.t_ms,
            params.v,
            params.gamma,
            params.working_distance,
        ),
        _ => *params,
    }
}

/// Executes one full picking cycle and plans the next sensing path.
pub fn run_cycle(
    state: &CycleState,
    strategy: Strategy,
    cfg: &CycleConfig,
    seed: u64,
) -> (CycleState, CycleResult) {
    let params = effective_path_params(strategy, &cfg.path);
    let n_views = views_for(strategy, &params);
    let k = &cfg.intrinsics;
    let path = &state.sensing_path;

    // ---- data collection: capture n views in motion ----
    let poses = planner::sample_path_poses(path, n_views);
    let omega = params.speed_mm_per_ms() / path.arc.radius; // rad per ms
    let dir = if path.end_angle >= path.start_angle {
        1.0
    } else {
        -1.0
    };
    let pose_fn = |t_s: f64| path.pose_at_angle(path.start_angle + dir * omega * (t_s * 1000.0));
    let angle_step = if n_views <= 1 {
        0.0
    } else {
        (path.end_angle - path.start_angle) / f64::from(n_views - 1)
    };
    let mut views = Vec::with_capacity(poses.len());
    for (i, true_pose) in poses.iter().enumerate() {
        let buffers = scene::render_buffers(&state.scene, true_pose, k);
        let view_id = state.cycle_index * 64 + i as u64;
        let noisy = scene::apply_noise_with_susceptibility(
            &buffers.depth,
            &buffers.normals,
            Some(&buffers.susceptibility),
            &cfg.noise,
            view_id,
            rng::mix(seed, "noise", &[]),
        );
        // Constant angular rate along the circle: capture i happens after
        // traversing i equal angle steps.
        let capture_time_s = (angle_step * f64::from(i as u32)).abs() / omega / 1000.0;
        let reported = scene::report_kinematics(
            &pose_fn,
            capture_time_s,
            i == 0, // the pull-up stop synchronizes the first view exactly
            &cfg.sync,
            rng::mix(seed, "sync", &[]),
            view_id,
        );
        views.push((noisy, reported));
    }

    // ---- data processing: fuse, recognize, choose grasp ----
    let view_set = ViewSet::new(views, *k, 0).expect("views are consistent by construction");
    let (fused, fusion_diagnostics) = fusion::fuse_with_diagnostics(&view_set, &cfg.fusion);
    let reference_pose = view_set.reference().1;
    let recognized = recognize(&fused, k, &reference_pose, &state.scene, &cfg.recognition);

    let mut grasped_id = None;
    let mut best_conf = f64::NEG_INFINITY;
    for obj in &recognized {
        if obj.confidence > best_conf {
            best_conf = obj.confidence;
            grasped_id = Some(obj.id);
        }
    }
    if grasped_id.is_some() && cfg.grasp_failure_rate > 0.0 {
        let u = rng::unit_f64(seed, "grasp", &[state.cycle_index]);
        if u < cfg.grasp_failure_rate {
            grasped_id = None;
        }
    }

    let next_scene = match grasped_id {
        Some(id) => scene::remove_object(&state.scene, id).expect("recognized object exists"),
        None => state.scene.clone(),
    };

    // ---- plan the next sensing path ----
    let remainder: Vec<RecognizedObject> = recognized
        .iter()
        .filter(|o| Some(o.id) != grasped_id)
        .copied()
        .collect();
    let mut search_index = state.search_index;
    let mut next_from_search = false;
    let target = match strategy {
        Strategy::RandomPathMultiview => {
            let bin = &state.scene.bin;
            Point3::new(
                (rng::unit_f64(seed, "randompath", &[state.cycle_index, 0]) * 2.0 - 1.0)
                    * bin.half_x,
                (rng::unit_f64(seed, "randompath", &[state.cycle_index, 1]) * 2.0 - 1.0)
                    * bin.half_y,
                0.0,
            )
        }
        _ => match planner::target_center(&remainder) {
            Ok(t) => t,
            Err(PlannerError::EmptyRemaining) => {
                let t = planner::search_target(
                    state.scene.bin.half_x,
                    state.scene.bin.half_y,
                    search_index,
                );
                search_index += 1;
                next_from_search = true;
                t
            }
            Err(_) => unreachable!("target_center only fails on empty input"),
        },
    };
    // The next pull-up happens above the object we just committed to grasp;
    // without a grasp, plan as if lifting from the target area itself.
    let grasp_point = grasped_id
        .and_then(|id| state.scene.object(id))
        .map(|o| o.center())
        .unwrap_or(target);
    let lift_point = Point3::new(
        grasp_point.x,
        grasp_point.y,
        state.scene.bin.wall_height + cfg.lift_clearance,
    );
    let next_path =
        match planner::plan_sensing_path(&target, &grasp_point, &lift_point, &cfg.drop_point, &params)
        {
            Ok(p) => p,
            // Infeasible geometry: carry the previous path over to the new
            // target area.
            Err(_) => state.sensing_path.translated_to(target),
        };

    // ---- takt accounting ----
    let breakdown = TimingBreakdown::new(u64::from(n_views), params.t_ms);
    let extra_ms = timing::extra_path_time(
        &path.lift_point,
        &path.start_location(),
        &path.end_location(),
        &path.drop_point,
        &path.arc,
        params.v,
    );
    let takt = timing::takt_contribution(&breakdown, cfg.place_duration_ms, extra_ms);

    let result = CycleResult {
        recognized: recognized.clone(),
        grasped_id,
        breakdown,
        takt,
        search_triggered: state.path_from_search,
        fusion_diagnostics,
        views_captured: n_views,
        fused,
        reference_pose,
        sensing_path: state.sensing_path.clone(),
    };
    let next_state = CycleState {
        scene: next_scene,
        dropping_path: DroppingPath {
            from: next_path.end_location(),
            to: next_path.drop_point,
        },
        sensing_path: next_path,
        pending: remainder,
        // The place action runs regardless; sensing adds only its
        // non-absorbed overhang plus the path detour.
        clock_ms: state.clock_ms + cfg.place_duration_ms + takt.charged_ms,
        cycle_index: state.cycle_index + 1,
        path_from_search: next_from_search,
        search_index,
    };
    (next_state, result)
}

/// Aggregate metrics over an experiment run.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ExperimentMetrics {
    /// Fraction of all objects picked across repetitions.
    pub complete_rate: f64,
    pub cycles_run: u64,
    pub searches_triggered: u64,
    pub mean_charged_takt_ms: f64,
    pub repetitions: u32,
}

impl ExperimentMetrics {
    pub fn mean_searches_per_experiment(&self) -> f64 {
        if self.repetitions == 0 {
            0.0
        } else {
            self.searches_triggered as f64 / f64::from(self.repetitions)
        }
    }
}

/// Per-repetition outcome (one full bin).
#[derive(Debug, Clone, Serialize)]
pub struct RepetitionOutcome {
    pub repetition: u32,
    pub initial_objects: usize,
    pub picked: usize,
    pub cycles: u32,
    pub searches: u32,
    pub mean_charged_ms: f64,
}

impl RepetitionOutcome {
    pub fn complete_rate(&self) -> f64 {
        if self.initial_objects == 0 {
            1.0
        } else {
            self.picked as f64 / self.initial_objects as f64
        }
    }
}

/// One row of the per-cycle trace.
#[derive(Debug, Clone, Serialize)]
pub struct CycleRecord {
    pub repetition: u32,
    pub cycle: u64,
    pub recognized: usize,
    pub grasped_id: Option<u32>,
    pub views: u32,
    pub sensing_total_ms: u64,
    pub extra_path_ms: f64,
    pub charged_ms: f64,
    pub clock_ms: f64,
    pub search: bool,
}

#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub scene_spec: SceneSpec,
    pub cycle: CycleConfig,
    pub strategy: Strategy,
    pub repetitions: u32,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub metrics: ExperimentMetrics,
    pub repetitions: Vec<RepetitionOutcome>,
    pub cycles: Vec<CycleRecord>,
}

/// Runs repeated full-bin experiments on fresh seeded scenes. Each
/// repetition's cycle count is capped at three times the object count so a
/// pathological configuration still terminates.
pub fn run_experiment(
    setup: &ExperimentSetup,
    seed: u64,
) -> Result<ExperimentReport, crate::scene::SceneError> {
    run_experiment_with(setup, seed, |_, _, _| {})
}

/// [`run_experiment`] with an observer invoked after every cycle (used by
/// the CLI to dump fused depth images without holding them all in memory).
pub fn run_experiment_with<F>(
    setup: &ExperimentSetup,
    seed: u64,
    mut observe: F,
) -> Result<ExperimentReport, crate::scene::SceneError>
where
    F: FnMut(u32, u64, &CycleResult),
{
    let mut repetitions = Vec::new();
    let mut cycles = Vec::new();
    let mut total_cycles = 0u64;
    let mut total_searches = 0u64;
    let mut charged_sum = 0.0;
    let mut picked_total = 0usize;
    let mut objects_total = 0usize;

    for rep in 0..setup.repetitions {
        let scene_seed = rng::mix(seed, "experiment-scene", &[u64::from(rep)]);
        let run_seed = rng::mix(seed, "experiment-run", &[u64::from(rep)]);
        let scene = scene::build_scene(&setup.scene_spec, scene_seed)?;
        let initial = scene.objects.len();
        objects_total += initial;
        let mut state = CycleState::initial(scene, &setup.cycle)
            .expect("default overhead path must be feasible");
        let cap = 3 * initial as u64;
        let mut picked = 0usize;
        let mut searches = 0u32;
        let mut rep_charged = 0.0;
        let mut ran = 0u32;
        while state.cycle_index < cap && !state.scene.objects.is_empty() {
            let (next, result) = run_cycle(&state, setup.strategy, &setup.cycle, run_seed);
            observe(rep, state.cycle_index, &result);
            if result.grasped_id.is_some() {
                picked += 1;
            }
            if result.search_triggered {
                searches += 1;
                total_searches += 1;
            }
            rep_charged += result.takt.charged_ms;
            charged_sum += result.takt.charged_ms;
            cycles.push(CycleRecord {
                repetition: rep,
                cycle: state.cycle_index,
                recognized: result.recognized.len(),
                grasped_id: result.grasped_id,
                views: result.views_captured,
                sensing_total_ms: result.breakdown.total_ms(),
                extra_path_ms: result.takt.extra_path_ms,
                charged_ms: result.takt.charged_ms,
                clock_ms: next.clock_ms,
                search: result.search_triggered,
            });
            ran += 1;
            total_cycles += 1;
            state = next;
        }
        repetitions.push(RepetitionOutcome {
            repetition: rep,
            initial_objects: initial,
            picked,
            cycles: ran,
            searches,
            mean_charged_ms: if ran > 0 { rep_charged / f64::from(ran) } else { 0.0 },
        });
        picked_total += picked;
    }

    let metrics = ExperimentMetrics {
        complete_rate: if objects_total == 0 {
            1.0
        } else {
            picked_total as f64 / objects_total as f64
        },
        cycles_run: total_cycles,
        searches_triggered: total_searches,
        mean_charged_takt_ms: if total_cycles > 0 {
            charged_sum / total_cycles as f64
        } else {
            0.0
        },
        repetitions: setup.repetitions,
    };
    Ok(ExperimentReport {
        metrics,
        repetitions,
        cycles,
    })
}

/// One-sided exact sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties must already be excluded.
pub fn sign_test_p(wins: u32, losses: u32) -> f64 {
    let m = wins + losses;
    if m == 0 {
        return 1.0;
    }
    // Sum C(m, k) / 2^m for k = wins..=m, in log space for stability.
    let ln_fact = |x: u32| -> f64 { (1..=x).map(|i| f64::from(i).ln()).sum() };
    let ln_m = ln_fact(m);
    let mut p = 0.0;
    for k in wins..=m {
        let ln_c = ln_m - ln_fact(k) - ln_fact(m - k);
        p += (ln_c - f64::from(m) * 2f64.ln()).exp();
    }
    p.min(1.0)
}
