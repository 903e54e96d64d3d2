//! Active-vision sensing-path planning.
//!
//! The next cycle's sensing path lives on the circle where the working-
//! distance sphere around the target center meets the motion plane through
//! grasp point A, lift-up point B, and drop point C. The start location M is
//! found by tilting the lift direction toward the drop side; the end
//! location N sits further along the circle so that M and N subtend the
//! coverage angle at the target center. Sampled poses in between all face
//! the target center.

use nalgebra::{Point3, Unit, Vector3};
use thiserror::Error;

use crate::geometry::{
    intersect_ray_arc, intersect_sphere_plane, rotate_direction_in_plane, Arc, GeometryError,
    Plane, Pose, Sphere,
};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PlannerError {
    #[error("no remaining recognized objects to aim at")]
    EmptyRemaining,
    #[error("working-distance sphere does not intersect the motion plane")]
    NoIntersection,
    #[error("construction ray misses the sensing circle")]
    NoArcHit,
    #[error("grasp, lift, and drop points are collinear")]
    DegeneratePlane,
}

impl From<GeometryError> for PlannerError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::NoIntersection => PlannerError::NoIntersection,
            _ => PlannerError::NoArcHit,
        }
    }
}

/// An object reported by the recognizer, position in the robot frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognizedObject {
    pub id: u32,
    pub position: Point3<f64>,
    /// In (0, 1]; weighs the object in the next target center.
    pub confidence: f64,
}

/// Sensing-path parameters. The two parameterizations — robot speed `v`
/// with capture interval `t`, or interval angle `alpha` with coverage angle
/// `beta` — are interchangeable; `alpha`/`beta` here are derived from
/// `(n, t, v, working_distance)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams {
    pub n: u32,
    pub t_ms: u64,
    /// Fraction of 1 m/s.
    pub v: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Tilt of the path start toward the drop point, radians.
    pub gamma: f64,
    /// Best sensor working distance, mm (the planning sphere radius).
    pub working_distance: f64,
}

pub const DEFAULT_GAMMA: f64 = 5.0 * std::f64::consts::PI / 180.0;

impl PathParams {
    pub fn new(n: u32, t_ms: u64, v: f64, gamma: f64, working_distance: f64) -> Self {
        assert!(n >= 1, "need at least one view");
        assert!(t_ms > 0, "capture interval must be positive");
        assert!(v > 0.0 && v <= 1.0, "speed fraction must be in (0, 1]");
        assert!(working_distance > 0.0);
        let (alpha, beta) = if n >= 2 {
            coverage_from_params(n, t_ms as f64, v, working_distance)
        } else {
            (0.0, 0.0)
        };
        Self {
            n,
            t_ms,
            v,
            alpha,
            beta,
            gamma,
            working_distance,
        }
    }

    /// Robot speed in mm/ms (numerically equal to m/s).
    pub fn speed_mm_per_ms(&self) -> f64 {
        self.v
    }
}

/// The coverage geometry: one interval spans the arc length the robot
/// travels between captures, expressed as an angle at working distance.
///
/// `alpha = v * 1000 mm/s * t/1000 s / r`, `beta = (n - 1) * alpha`.
pub fn coverage_from_params(n: u32, t_ms: f64, v: f64, r_mm: f64) -> (f64, f64) {
    assert!(n >= 2, "coverage needs at least two views");
    let arc_len_mm = v * 1000.0 * (t_ms / 1000.0);
    let alpha = arc_len_mm / r_mm;
    let beta = f64::from(n - 1) * alpha;
    (alpha, beta)
}

/// Confidence-weighted centroid of the remaining recognized objects.
pub fn target_center(remaining: &[RecognizedObject]) -> Result<Point3<f64>, PlannerError> {
    if remaining.is_empty() {
        return Err(PlannerError::EmptyRemaining);
    }
    let mut acc = Vector3::zeros();
    let mut total = 0.0;
    for obj in remaining {
        acc += obj.position.coords * obj.confidence;
        total += obj.confidence;
    }
    Ok(Point3::from(acc / total))
}

/// A planned sensing path: start and end sensor poses on the sensing
/// circle, both looking at the shared target center.
#[derive(Debug, Clone)]
pub struct SensingPath {
    pub start_pose: Pose,
    pub end_pose: Pose,
    pub target_center: Point3<f64>,
    /// Angle subtended at the target center by the start and end locations.
    pub coverage_angle: f64,
    pub arc: Arc,
    /// Circle parameters of the start and end locations.
    pub start_angle: f64,
    pub end_angle: f64,
    /// Lift-up point the robot passes before the path.
    pub lift_point: Point3<f64>,
    /// Drop point the robot continues to after the path.
    pub drop_point: Point3<f64>,
}

impl SensingPath {
    pub fn start_location(&self) -> Point3<f64> {
        self.arc.point_at(self.start_angle)
    }

    pub fn end_location(&self) -> Point3<f64> {
        self.arc.point_at(self.end_angle)
    }

    /// Sensor pose at circle parameter `theta`, facing the target center,
    /// camera x along the direction of travel.
    pub fn pose_at_angle(&self, theta: f64) -> Pose {
        let location = self.arc.point_at(theta);
        let z_axis = (self.target_center - location).normalize();
        let travel = if self.end_angle >= self.start_angle {
            1.0
        } else {
            -1.0
        };
        let tangent = self.arc.tangent_at(theta).into_inner() * travel;
        // The circle tangent is orthogonal to the view direction up to
        // rounding; re-orthogonalize and renormalize.
        let x_axis = (tangent - z_axis * tangent.dot(&z_axis)).normalize();
        let y_axis = z_axis.cross(&x_axis);
        let rotation = nalgebra::Matrix3::from_columns(&[x_axis, y_axis, z_axis]);
        Pose::from_parts(rotation, location.coords)
    }

    /// Arc length from start to end, mm.
    pub fn arc_length(&self) -> f64 {
        self.arc.radius * (self.end_angle - self.start_angle).abs()
    }

    /// The same path rigidly shifted so its target center lands on
    /// `new_target` (the infeasibility fallback).
    pub fn translated_to(&self, new_target: Point3<f64>) -> SensingPath {
        let shift = new_target - self.target_center;
        let mut arc = self.arc;
        arc.center += shift;
        let translate =
            |p: &Pose| Pose::from_parts(p.rotation().to_owned(), p.translation() + shift);
        SensingPath {
            start_pose: translate(&self.start_pose),
            end_pose: translate(&self.end_pose),
            target_center: new_target,
            coverage_angle: self.coverage_angle,
            arc,
            start_angle: self.start_angle,
            end_angle: self.end_angle,
            lift_point: self.lift_point + shift,
            drop_point: self.drop_point + shift,
        }
    }
}

/// Picks the rotation sign that tilts `dir` toward `toward` and applies it.
fn rotate_toward(
    dir: &Unit<Vector3<f64>>,
    pivot: &Point3<f64>,
    angle: f64,
    plane: &Plane,
    toward: &Vector3<f64>,
) -> Result<Unit<Vector3<f64>>, GeometryError> {
    let plus = rotate_direction_in_plane(dir, pivot, angle, plane)?;
    if angle == 0.0 {
        return Ok(plus);
    }
    let minus = rotate_direction_in_plane(dir, pivot, -angle, plane)?;
    if plus.dot(toward) >= minus.dot(toward) {
        Ok(plus)
    } else {
        Ok(minus)
    }
}

/// Finds the start and end pose locations of a sensing path.
///
/// Steps: intersect the working-distance sphere around `t` with the plane
/// through `a`, `b`, `c`; shoot a ray from `b` along the lift direction
/// tilted by `gamma` toward the drop side to get M; place N further along
/// the circle so that M and N subtend `beta` at `t`, again on the drop
/// side.
pub fn plan_sensing_path(
    t: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
    params: &PathParams,
) -> Result<SensingPath, PlannerError> {
    let plane = Plane::from_points(a, b, c).ok_or(PlannerError::DegeneratePlane)?;
    let sphere = Sphere::new(*t, params.working_distance);
    let arc = intersect_sphere_plane(&sphere, &plane).map_err(PlannerError::from)?;

    // Lift direction A -> B extended beyond B, tilted by gamma toward C.
    let lift = Unit::new_normalize(b - a);
    let toward_c = c - b;
    let tilted =
        rotate_toward(&lift, b, params.gamma, &plane, &toward_c).map_err(PlannerError::from)?;
    let hits = intersect_ray_arc(b, &tilted, &arc).map_err(PlannerError::from)?;
    let m = *hits.first().ok_or(PlannerError::NoArcHit)?;
    let theta_m = arc.angle_of(&m);

    // N lies on the circle at the angular offset that makes the view
    // directions from T to M and N subtend beta:
    //   cos(beta) = (rho^2 cos(dtheta) + h^2) / R^2.
    let rho = arc.radius;
    let h2 = (arc.center - t).norm_squared();
    let r2 = params.working_distance * params.working_distance;
    let cos_dtheta = (r2 * params.beta.cos() - h2) / (rho * rho);
    if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos_dtheta) {
        return Err(PlannerError::NoArcHit);
    }
    let dtheta = cos_dtheta.clamp(-1.0, 1.0).acos();

    // Advance toward the drop point.
    let n_plus = arc.point_at(theta_m + dtheta);
    let n_minus = arc.point_at(theta_m - dtheta);
    let c_in_plane = plane.project_point(c);
    let theta_n = if (n_plus - m).dot(&(c_in_plane - m)) >= (n_minus - m).dot(&(c_in_plane - m)) {
        theta_m + dtheta
    } else {
        theta_m - dtheta
    };

    let mut path = SensingPath {
        start_pose: Pose::identity(),
        end_pose: Pose::identity(),
        target_center: *t,
        coverage_angle: params.beta,
        arc,
        start_angle: theta_m,
        end_angle: theta_n,
        lift_point: *b,
        drop_point: *c,
    };
    path.start_pose = path.pose_at_angle(theta_m);
    path.end_pose = path.pose_at_angle(theta_n);
    Ok(path)
}

/// Poses at equal circle spacing from start to end, all facing the target
/// center, with a continuous roll convention (camera x along travel).
pub fn sample_path_poses(path: &SensingPath, n: u32) -> Vec<Pose> {
    assert!(n >= 1);
    if n == 1 {
        return vec![path.start_pose];
    }
    let step = (path.end_angle - path.start_angle) / f64::from(n - 1);
    (0..n)
        .map(|i| path.pose_at_angle(path.start_angle + step * f64::from(i)))
        .collect()
}

/// Structured text record of a planned path: endpoints, target center,
/// coverage angle, and the n sampled poses (rotation row-major).
pub fn trace_record(path: &SensingPath, n: u32) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let p3 = |p: &Point3<f64>| format!("{:.6} {:.6} {:.6}", p.x, p.y, p.z);
    let m = path.start_location();
    let nn = path.end_location();
    writeln!(out, "M {}", p3(&m)).unwrap();
    writeln!(out, "N {}", p3(&nn)).unwrap();
    writeln!(out, "T {}", p3(&path.target_center)).unwrap();
    writeln!(out, "beta {:.9}", path.coverage_angle).unwrap();
    writeln!(out, "samples {n}").unwrap();
    for (i, pose) in sample_path_poses(path, n).iter().enumerate() {
        let r = pose.rotation();
        let t = pose.translation();
        let rot: Vec<String> = (0..3)
            .flat_map(|row| (0..3).map(move |col| format!("{:.9}", r[(row, col)])))
            .collect();
        writeln!(
            out,
            "pose {i} rotation {} translation {:.6} {:.6} {:.6}",
            rot.join(" "),
            t.x,
            t.y,
            t.z
        )
        .unwrap();
    }
    out
}

/// Deterministic spiral of look-at targets over the bin floor for search
/// mode, widening outward from the bin center.
pub fn search_target(half_x: f64, half_y: f64, index: u64) -> Point3<f64> {
    const TURNS: u64 = 16;
    let k = index % TURNS;
    let frac = ((k + 1) as f64 / TURNS as f64).sqrt() * 0.8;
    let angle = k as f64 * 2.399_963_229_728_653; // golden angle
    Point3::new(angle.cos() * half_x * frac, angle.sin() * half_y * frac, 0.0)
}
