//! Synthetic stand-in for the physical rig: piled primitive objects in a
//! bin, analytic ray-cast depth rendering, view-dependent dropout noise for
//! shiny surfaces, and robot kinematics reporting with synchronization
//! jitter.
//!
//! Piles are static: placement stacks bounding spheres with rejection
//! sampling and removal does not disturb neighbors. Depth comes straight
//! from ray casting (the stereo pipeline it replaces is out of scope here).

use nalgebra::{Point3, Unit, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::depth::DepthImage;
use crate::geometry::{Intrinsics, Pose};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("could not place object after {0} rejections (bin too small?)")]
    PlacementFailure(usize),
    #[error("no object with id {0} in scene")]
    UnknownObject(u32),
}

/// Solid primitive, dimensions in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vector3<f64> },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    /// Radius of the bounding sphere around the shape's center.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents } => half_extents.norm(),
            Shape::Cylinder {
                radius,
                half_height,
            } => (radius * radius + half_height * half_height).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub pose: Pose,
    /// How strongly the view-dependent dropout couples to this surface.
    pub dropout_susceptibility: f64,
}

impl SceneObject {
    pub fn center(&self) -> Point3<f64> {
        Point3::from(*self.pose.translation())
    }
}

/// Open-top box centered on the origin, floor in the z = 0 plane, +z up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub half_x: f64,
    pub half_y: f64,
    pub wall_height: f64,
}

impl Default for Bin {
    fn default() -> Self {
        // 500 x 250 mm footprint.
        Self {
            half_x: 250.0,
            half_y: 125.0,
            wall_height: 150.0,
        }
    }
}

impl Bin {
    pub fn center(&self) -> Point3<f64> {
        Point3::new(0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bin: Bin,
    pub objects: Vec<SceneObject>,
    pub rng_seed: u64,
}

impl Scene {
    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }
}

/// Template for one class of objects to drop into the bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTemplate {
    pub shape: Shape,
    pub count: u32,
    pub dropout_susceptibility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub bin: Bin,
    pub templates: Vec<ObjectTemplate>,
    pub max_rejections: usize,
    /// When set, objects land within this radius of the bin center (parts
    /// dumped into a bin heap up in the middle); otherwise anywhere inside.
    pub pile_radius: Option<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            bin: Bin::default(),
            templates: Vec::new(),
            max_rejections: 10_000,
            pile_radius: None,
        }
    }
}

/// View-dependent sensor noise. Direct reflections on shiny surfaces wipe
/// out measurements in patches that move with the viewpoint, so dropout has
/// a base rate plus an incidence-coupled term whose random field re-seeds
/// per view (scaled by `view_decorrelation`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Gaussian sigma on depth, mm.
    pub sensor_accuracy: f64,
    pub dropout_base: f64,
    pub dropout_view_gain: f64,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    /// 1 = dropout pattern independent per view; 0 = frozen across views.
    pub view_decorrelation: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sensor_accuracy: 1.0,
            dropout_base: 0.45,
            dropout_view_gain: 0.4,
            outlier_rate: 0.02,
            outlier_magnitude: 40.0,
            view_decorrelation: 1.0,
        }
    }
}

impl NoiseModel {
    /// A model that leaves depth effectively untouched.
    pub fn noiseless() -> Self {
        Self {
            sensor_accuracy: 1e-300,
            dropout_base: 0.0,
            dropout_view_gain: 0.0,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            view_decorrelation: 1.0,
        }
    }
}

/// Hand-eye synchronization quality of the kinematics report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncModel {
    /// Uniform bound on the pose-timestamp error, seconds.
    pub latency_jitter: f64,
    /// Robot speed as a fraction of 1 m/s.
    pub speed: f64,
}

impl Default for SyncModel {
    fn default() -> Self {
        Self {
            latency_jitter: 0.002,
            speed: 0.7,
        }
    }
}

/// Drops objects into the bin one by one, stacking bounding spheres,
/// deterministically for a fixed seed.
pub fn build_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    let mut rng = rng::substream(seed, "scene", &[]);
    let mut objects: Vec<SceneObject> = Vec::new();
    let mut rejections = 0usize;
    let mut next_id = 0u32;
    for template in &spec.templates {
        let r = template.shape.bounding_radius();
        for _ in 0..template.count {
            loop {
                if rejections >= spec.max_rejections {
                    return Err(SceneError::PlacementFailure(rejections));
                }
                let reach_x = (spec.bin.half_x - r).min(spec.pile_radius.unwrap_or(f64::MAX));
                let reach_y = (spec.bin.half_y - r).min(spec.pile_radius.unwrap_or(f64::MAX));
                let x = rng.gen_range(-reach_x..=reach_x);
                let y = rng.gen_range(-reach_y..=reach_y);
                if let Some(pr) = spec.pile_radius {
                    if x * x + y * y > pr * pr {
                        rejections += 1;
                        continue;
                    }
                }
                let axis = Unit::new_normalize(Vector3::new(
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0f64),
                ));
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                // Rest height: on the floor, or on top of any overlapping
                // bounding sphere already placed.
                let mut z = r;
                for other in &objects {
                    let or = other.shape.bounding_radius();
                    let c = other.center();
                    let dxy = ((c.x - x).powi(2) + (c.y - y).powi(2)).sqrt();
                    let reach = r + or;
                    if dxy < reach {
                        z = z.max(c.z + (reach * reach - dxy * dxy).sqrt());
                    }
                }
                if z + r > spec.bin.wall_height {
                    rejections += 1;
                    continue;
                }
                let rotation = Pose::from_axis_angle(&axis, angle);
                objects.push(SceneObject {
                    id: next_id,
                    shape: template.shape,
                    pose: Pose::from_parts(rotation.rotation().to_owned(), Vector3::new(x, y, z)),
                    dropout_susceptibility: template.dropout_susceptibility,
                });
                next_id += 1;
                break;
            }
        }
    }
    Ok(Scene {
        bin: spec.bin,
        objects,
        rng_seed: seed,
    })
}

/// Returns the scene without the given object; nothing else moves.
pub fn remove_object(scene: &Scene, id: u32) -> Result<Scene, SceneError> {
    if scene.object(id).is_none() {
        return Err(SceneError::UnknownObject(id));
    }
    let mut out = scene.clone();
    out.objects.retain(|o| o.id != id);
    Ok(out)
}

/// What a pixel's ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitKind {
    None,
    Bin,
    Object(u32),
}

/// Depth plus the per-pixel surface data the noise model and recognizer use.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub depth: DepthImage,
    /// Unit surface normals in the camera frame (zero vector where no hit);
    /// surfaces facing the sensor have negative z.
    pub normals: Vec<Vector3<f64>>,
    pub hits: Vec<HitKind>,
    /// Dropout susceptibility of the surface hit (0 for bin and misses).
    pub susceptibility: Vec<f64>,
}

struct Hit {
    s: f64,
    normal: Vector3<f64>,
    kind: HitKind,
    susceptibility: f64,
}

const RAY_EPS: f64 = 1e-9;

fn ray_sphere(
    o: &Point3<f64>,
    d: &Vector3<f64>,
    c: &Point3<f64>,
    r: f64,
) -> Option<(f64, Vector3<f64>)> {
    let oc = o - c;
    let a = d.dot(d);
    let b = 2.0 * d.dot(&oc);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - 4.0 * a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let s0 = (-b - sq) / (2.0 * a);
    let s = if s0 > RAY_EPS {
        s0
    } else {
        let s1 = (-b + sq) / (2.0 * a);
        if s1 > RAY_EPS {
            s1
        } else {
            return None;
        }
    };
    let p = o + d * s;
    Some((s, (p - c).normalize()))
}

/// Slab test in the box's local frame.
fn ray_box(
    o: &Point3<f64>,
    d: &Vector3<f64>,
    pose: &Pose,
    half: &Vector3<f64>,
) -> Option<(f64, Vector3<f64>)> {
    let inv = pose.invert();
    let ol = inv.apply(o);
    let dl = inv.apply_vector(d);
    let mut s_near = f64::NEG_INFINITY;
    let mut s_far = f64::INFINITY;
    let mut near_axis = 0usize;
    for axis in 0..3 {
        let (olc, dlc, h) = (ol[axis], dl[axis], half[axis]);
        if dlc.abs() < 1e-15 {
            if olc.abs() > h {
                return None;
            }
            continue;
        }
        let mut t0 = (-h - olc) / dlc;
        let mut t1 = (h - olc) / dlc;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > s_near {
            s_near = t0;
            near_axis = axis;
        }
        s_far = s_far.min(t1);
        if s_near > s_far {
            return None;
        }
    }
    if s_near <= RAY_EPS {
        return None; // origin inside, or box behind the ray
    }
    let pl = ol + dl * s_near;
    let mut nl = Vector3::zeros();
    nl[near_axis] = pl[near_axis].signum();
    Some((s_near, pose.apply_vector(&nl)))
}

/// Capped cylinder in its local frame (axis = local z).
fn ray_cylinder(
    o: &Point3<f64>,
    d: &Vector3<f64>,
    pose: &Pose,
    r: f64,
    hh: f64,
) -> Option<(f64, Vector3<f64>)> {
    let inv = pose.invert();
    let ol = inv.apply(o);
    let dl = inv.apply_vector(d);
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let consider = |s: f64, nl: Vector3<f64>, best: &mut Option<(f64, Vector3<f64>)>| {
        if s > RAY_EPS && best.is_none_or(|(bs, _)| s < bs) {
            *best = Some((s, nl));
        }
    };
    let a = dl.x * dl.x + dl.y * dl.y;
    if a > 1e-15 {
        let b = 2.0 * (ol.x * dl.x + ol.y * dl.y);
        let c = ol.x * ol.x + ol.y * ol.y - r * r;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for s in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = ol.z + dl.z * s;
                if z.abs() <= hh {
                    let p = ol + dl * s;
                    consider(s, Vector3::new(p.x, p.y, 0.0).normalize(), &mut best);
                }
            }
        }
    }
    if dl.z.abs() > 1e-15 {
        for cap in [-hh, hh] {
            let s = (cap - ol.z) / dl.z;
            let p = ol + dl * s;
            if p.x * p.x + p.y * p.y <= r * r {
                consider(s, Vector3::new(0.0, 0.0, cap.signum()), &mut best);
            }
        }
    }
    best.map(|(s, nl)| (s, pose.apply_vector(&nl)))
}

/// Axis-aligned rectangle at `coords[axis] = level`, bounded on the other
/// two axes.
fn ray_rect(
    o: &Point3<f64>,
    d: &Vector3<f64>,
    axis: usize,
    level: f64,
    b0: (usize, f64, f64),
    b1: (usize, f64, f64),
) -> Option<f64> {
    if d[axis].abs() < 1e-15 {
        return None;
    }
    let s = (level - o[axis]) / d[axis];
    if s <= RAY_EPS {
        return None;
    }
    let p = o + d * s;
    if p[b0.0] < b0.1 || p[b0.0] > b0.2 || p[b1.0] < b1.1 || p[b1.0] > b1.2 {
        return None;
    }
    Some(s)
}

fn intersect_bin(o: &Point3<f64>, d: &Vector3<f64>, bin: &Bin) -> Option<(f64, Vector3<f64>)> {
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let consider = |s: Option<f64>, n: Vector3<f64>, best: &mut Option<(f64, Vector3<f64>)>| {
        if let Some(s) = s {
            if best.is_none_or(|(bs, _)| s < bs) {
                // Face the ray so incidence angles stay well defined.
                let n = if n.dot(d) > 0.0 { -n } else { n };
                *best = Some((s, n));
            }
        }
    };
    let (hx, hy, hz) = (bin.half_x, bin.half_y, bin.wall_height);
    consider(
        ray_rect(o, d, 2, 0.0, (0, -hx, hx), (1, -hy, hy)),
        Vector3::z(),
        &mut best,
    );
    consider(
        ray_rect(o, d, 0, -hx, (1, -hy, hy), (2, 0.0, hz)),
        Vector3::x(),
        &mut best,
    );
    consider(
        ray_rect(o, d, 0, hx, (1, -hy, hy), (2, 0.0, hz)),
        Vector3::x(),
        &mut best,
    );
    consider(
        ray_rect(o, d, 1, -hy, (0, -hx, hx), (2, 0.0, hz)),
        Vector3::y(),
        &mut best,
    );
    consider(
        ray_rect(o, d, 1, hy, (0, -hx, hx), (2, 0.0, hz)),
        Vector3::y(),
        &mut best,
    );
    best
}

fn intersect_object(
    o: &Point3<f64>,
    d: &Vector3<f64>,
    obj: &SceneObject,
) -> Option<(f64, Vector3<f64>)> {
    match obj.shape {
        Shape::Sphere { radius } => ray_sphere(o, d, &obj.center(), radius),
        Shape::Box { half_extents } => ray_box(o, d, &obj.pose, &half_extents),
        Shape::Cylinder {
            radius,
            half_height,
        } => ray_cylinder(o, d, &obj.pose, radius, half_height),
    }
}

fn cast(scene: &Scene, o: &Point3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if let Some((s, normal)) = intersect_bin(o, d, &scene.bin) {
        best = Some(Hit {
            s,
            normal,
            kind: HitKind::Bin,
            susceptibility: 0.0,
        });
    }
    for obj in &scene.objects {
        if let Some((s, normal)) = intersect_object(o, d, obj) {
            if best.as_ref().is_none_or(|b| s < b.s) {
                best = Some(Hit {
                    s,
                    normal,
                    kind: HitKind::Object(obj.id),
                    susceptibility: obj.dropout_susceptibility,
                });
            }
        }
    }
    best
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn full(k: &Intrinsics) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: k.width,
            y1: k.height,
        }
    }
}

/// Ray-casts the scene into per-pixel depth, normals, hit ids, and
/// susceptibility, over an optional pixel rectangle.
pub fn render_buffers_in(
    scene: &Scene,
    sensor_pose: &Pose,
    k: &Intrinsics,
    rect: PixelRect,
) -> RenderBuffers {
    let mut depth = DepthImage::new(k.width, k.height);
    let n = depth.len();
    let mut normals = vec![Vector3::zeros(); n];
    let mut hits = vec![HitKind::None; n];
    let mut susceptibility = vec![0.0; n];
    let origin = Point3::from(*sensor_pose.translation());
    let world_to_cam = sensor_pose.invert();
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            // Unnormalized direction with unit optical-axis component: the
            // ray parameter is then directly the camera depth.
            let d_cam = Vector3::new(
                (f64::from(x) - k.cx) / k.fx,
                (f64::from(y) - k.cy) / k.fy,
                1.0,
            );
            let d_world = sensor_pose.apply_vector(&d_cam);
            if let Some(hit) = cast(scene, &origin, &d_world) {
                let idx = depth.index(x, y);
                depth.set(x, y, hit.s);
                normals[idx] = world_to_cam.apply_vector(&hit.normal);
                hits[idx] = hit.kind;
                susceptibility[idx] = hit.susceptibility;
            }
        }
    }
    RenderBuffers {
        depth,
        normals,
        hits,
        susceptibility,
    }
}

pub fn render_buffers(scene: &Scene, sensor_pose: &Pose, k: &Intrinsics) -> RenderBuffers {
    render_buffers_in(scene, sensor_pose, k, PixelRect::full(k))
}

/// Noise-free depth render.
pub fn render_depth(scene: &Scene, sensor_pose: &Pose, k: &Intrinsics) -> DepthImage {
    render_buffers(scene, sensor_pose, k).depth
}

/// Counts pixels covered by `id` when it is the only object in the bin,
/// restricted to the object's projected bounding box for speed.
pub fn unoccluded_pixel_count(
    scene: &Scene,
    id: u32,
    sensor_pose: &Pose,
    k: &Intrinsics,
) -> Result<usize, SceneError> {
    let obj = scene.object(id).ok_or(SceneError::UnknownObject(id))?;
    let lone = Scene {
        bin: scene.bin,
        objects: vec![obj.clone()],
        rng_seed: scene.rng_seed,
    };
    let rect = projected_bounds(obj, sensor_pose, k);
    let buffers = render_buffers_in(&lone, sensor_pose, k, rect);
    Ok(buffers
        .hits
        .iter()
        .filter(|h| **h == HitKind::Object(id))
        .count())
}

/// Conservative pixel rectangle covering the object's bounding sphere.
pub fn projected_bounds(obj: &SceneObject, sensor_pose: &Pose, k: &Intrinsics) -> PixelRect {
    let r = obj.shape.bounding_radius();
    let p_cam = sensor_pose.invert().apply(&obj.center());
    let near = p_cam.z - r;
    if near <= 1.0 {
        return PixelRect::full(k);
    }
    let cx = k.fx * p_cam.x / p_cam.z + k.cx;
    let cy = k.fy * p_cam.y / p_cam.z + k.cy;
    let rx = k.fx * r / near + 2.0;
    let ry = k.fy * r / near + 2.0;
    PixelRect {
        x0: (cx - rx).floor().clamp(0.0, f64::from(k.width)) as u32,
        y0: (cy - ry).floor().clamp(0.0, f64::from(k.height)) as u32,
        x1: (cx + rx).ceil().clamp(0.0, f64::from(k.width)) as u32,
        y1: (cy + ry).ceil().clamp(0.0, f64::from(k.height)) as u32,
    }
}

fn effective_view_key(view_id: u64, decorrelation: f64) -> u64 {
    if decorrelation <= 0.0 {
        return 0;
    }
    (view_id as f64 * decorrelation.min(1.0)).floor() as u64
}

/// Applies dropout, Gaussian depth noise, and sparse outliers to an ideal
/// render. Deterministic for a fixed `(seed, view_id)`.
pub fn apply_noise(
    ideal: &DepthImage,
    normals: &[Vector3<f64>],
    model: &NoiseModel,
    view_id: u64,
    seed: u64,
) -> DepthImage {
    apply_noise_with_susceptibility(ideal, normals, None, model, view_id, seed)
}

/// Like [`apply_noise`], with per-pixel material susceptibility scaling the
/// view-dependent dropout term (1.0 everywhere when absent).
pub fn apply_noise_with_susceptibility(
    ideal: &DepthImage,
    normals: &[Vector3<f64>],
    susceptibility: Option<&[f64]>,
    model: &NoiseModel,
    view_id: u64,
    seed: u64,
) -> DepthImage {
    assert_eq!(ideal.len(), normals.len(), "normals must match image size");
    let view_key = effective_view_key(view_id, model.view_decorrelation);
    let mut out = DepthImage::new(ideal.width(), ideal.height());
    for (x, y, d) in ideal.iter_valid() {
        let idx = ideal.index(x, y);
        // Specular lobe: dropout concentrates where the surface faces the
        // sensor head-on and the projector glare saturates the images.
        // Normals are camera-frame, so |n.z| is the incidence cosine
        // against the optical axis.
        let g = if model.dropout_view_gain != 0.0 {
            let n = normals[idx];
            let cos_inc = if n.norm_squared() > 0.0 {
                (n.z.abs() / n.norm()).min(1.0)
            } else {
                0.0
            };
            let mat = susceptibility.map_or(1.0, |s| s[idx]);
            let field = rng::unit_f64(seed, "dropfield", &[view_key, idx as u64]);
            cos_inc.powi(4) * mat * field
        } else {
            0.0
        };
        let p_drop = (model.dropout_base + model.dropout_view_gain * g).clamp(0.0, 1.0);
        if rng::unit_f64(seed, "dropout", &[view_key, idx as u64]) < p_drop {
            continue;
        }
        let mut depth =
            d + rng::gaussian_f64(seed, "gauss", &[view_id, idx as u64]) * model.sensor_accuracy;
        if model.outlier_rate > 0.0
            && rng::unit_f64(seed, "outlier", &[view_id, idx as u64]) < model.outlier_rate
        {
            let sign = if rng::unit_f64(seed, "outsign", &[view_id, idx as u64]) < 0.5 {
                -1.0
            } else {
                1.0
            };
            depth += sign * model.outlier_magnitude;
        }
        if depth > 0.0 {
            out.set(x, y, depth);
        }
    }
    out
}

/// Sensor pose at `height` above the bin center looking straight down
/// (+x camera = +x world).
pub fn overhead_pose(height: f64) -> Pose {
    let rotation = nalgebra::Matrix3::new(
        1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0, //
        0.0, 0.0, -1.0,
    );
    Pose::from_parts(rotation, Vector3::new(0.0, 0.0, height))
}

/// Reports the robot pose at a capture instant as the robot SDK would:
/// the true pose evaluated at a time offset by uniform latency jitter.
/// At a declared stop the report is exact regardless of jitter.
pub fn report_kinematics(
    true_pose_at: &dyn Fn(f64) -> Pose,
    capture_time: f64,
    at_stop: bool,
    sync: &SyncModel,
    seed: u64,
    lane: u64,
) -> Pose {
    if at_stop || sync.latency_jitter == 0.0 {
        return true_pose_at(capture_time);
    }
    let u = (rng::unit_f64(seed, "sync", &[lane]) * 2.0 - 1.0) * sync.latency_jitter;
    true_pose_at(capture_time + u)
}
