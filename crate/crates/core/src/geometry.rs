//! Rigid-body poses, pinhole projection, and the sphere/plane/arc
//! constructions used by the sensing-path planner.
//!
//! Conventions: millimeters and radians everywhere; camera frame has +z
//! forward along the optical axis, +x right, +y down. "The sensor faces a
//! target" means the target lies on the camera's +z axis.

use nalgebra::{Matrix3, Point3, Unit, Vector3};
use thiserror::Error;

/// Tolerance for pure geometric identities (double precision headroom).
pub const GEOM_TOL: f64 = 1e-9;
/// Tolerance for quantities crossing module boundaries (mm).
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal with determinant +1")]
    InvalidRotation,
    #[error("point or depth lies behind the camera (z <= 0)")]
    NonPositiveDepth,
    #[error("sphere and plane do not intersect in a circle")]
    NoIntersection,
    #[error("direction does not lie in the given plane")]
    DirectionNotInPlane,
    #[error("ray is not contained in the arc's plane")]
    RayNotInPlane,
}

/// Rigid transform: `apply(p) = R p + t`, rotation orthonormal with det +1,
/// translation in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

fn orthonormality_drift(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

/// Gram-Schmidt on the columns, preserving handedness.
fn reorthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let c0 = r.column(0).normalize();
    let mut c1 = r.column(1) - c0 * r.column(1).dot(&c0);
    c1.normalize_mut();
    let c2 = c0.cross(&c1);
    Matrix3::from_columns(&[c0, c1, c2])
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, validating the rotation invariant.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if orthonormality_drift(&rotation) > GEOM_TOL || rotation.determinant() < 0.0 {
            return Err(GeometryError::InvalidRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds from a rotation known to be orthonormal (e.g. axis-angle
    /// constructions); drift beyond tolerance is repaired.
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = if orthonormality_drift(&rotation) > GEOM_TOL {
            reorthonormalize(&rotation)
        } else {
            rotation
        };
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the +z axis by `angle` radians.
    pub fn from_rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `angle` radians about a unit `axis` (Rodrigues form).
    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let k = axis.into_inner();
        let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
        let rotation = Matrix3::identity() + kx * s + kx * kx * (1.0 - c);
        Self::from_parts(rotation, Vector3::zeros())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Composition: the result applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_drift(&rotation) > GEOM_TOL {
            rotation = reorthonormalize(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == Matrix3::identity() && self.translation == Vector3::zeros()
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(
            (0.0..width as f64).contains(&cx) && (0.0..height as f64).contains(&cy),
            "principal point must lie inside the image"
        );
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }
}

/// Projects a camera-frame point to continuous pixel coordinates and depth.
pub fn project(k: &Intrinsics, p_cam: &Point3<f64>) -> Result<([f64; 2], f64), GeometryError> {
    if p_cam.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth);
    }
    let px = k.fx * p_cam.x / p_cam.z + k.cx;
    let py = k.fy * p_cam.y / p_cam.z + k.cy;
    Ok(([px, py], p_cam.z))
}

/// Lifts a pixel at the given depth back into the camera frame.
pub fn backproject(k: &Intrinsics, pixel: [f64; 2], depth: f64) -> Result<Point3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth);
    }
    Ok(Point3::new(
        (pixel[0] - k.cx) / k.fx * depth,
        (pixel[1] - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Plane through `point` with unit `normal`.
#[derive(Debug, Clone, Copy)]
pub struct Plane {
    pub point: Point3<f64>,
    pub normal: Unit<Vector3<f64>>,
}

impl Plane {
    pub fn new(point: Point3<f64>, normal: Vector3<f64>) -> Self {
        Self {
            point,
            normal: Unit::new_normalize(normal),
        }
    }

    /// Plane spanned by three non-collinear points, normal along
    /// `(b - a) x (c - a)`.
    pub fn from_points(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<Self> {
        let n = (b - a).cross(&(c - a));
        if n.norm() < BOUNDARY_TOL {
            return None;
        }
        Some(Self::new(*a, n))
    }

    /// Signed distance of `p` from the plane along the normal.
    pub fn signed_distance(&self, p: &Point3<f64>) -> f64 {
        (p - self.point).dot(&self.normal)
    }

    pub fn project_point(&self, p: &Point3<f64>) -> Point3<f64> {
        p - self.normal.into_inner() * self.signed_distance(p)
    }

    pub fn contains_vector(&self, v: &Vector3<f64>, tol: f64) -> bool {
        v.dot(&self.normal).abs() <= tol * v.norm().max(1.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sphere {
    pub center: Point3<f64>,
    pub radius: f64,
}

impl Sphere {
    pub fn new(center: Point3<f64>, radius: f64) -> Self {
        assert!(radius > 0.0, "sphere radius must be positive");
        Self { center, radius }
    }
}

/// Circle from a sphere-plane intersection, parameterized as
/// `point_at(theta) = center + radius (u cos(theta) + v sin(theta))`.
#[derive(Debug, Clone, Copy)]
pub struct Arc {
    pub center: Point3<f64>,
    pub radius: f64,
    pub plane_normal: Unit<Vector3<f64>>,
    pub u: Unit<Vector3<f64>>,
    pub v: Unit<Vector3<f64>>,
}

impl Arc {
    pub fn point_at(&self, theta: f64) -> Point3<f64> {
        self.center + (self.u.into_inner() * theta.cos() + self.v.into_inner() * theta.sin()) * self.radius
    }

    /// Circle tangent at `theta`, in the direction of increasing `theta`.
    pub fn tangent_at(&self, theta: f64) -> Unit<Vector3<f64>> {
        Unit::new_normalize(-self.u.into_inner() * theta.sin() + self.v.into_inner() * theta.cos())
    }

    /// Angle parameter of the in-plane point `p` relative to the `u` axis.
    pub fn angle_of(&self, p: &Point3<f64>) -> f64 {
        let d = p - self.center;
        d.dot(&self.v).atan2(d.dot(&self.u))
    }

    pub fn plane(&self) -> Plane {
        Plane {
            point: self.center,
            normal: self.plane_normal,
        }
    }
}

/// Any vector orthogonal to `n`, unit length.
fn orthogonal_unit(n: &Unit<Vector3<f64>>) -> Unit<Vector3<f64>> {
    let trial = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    Unit::new_normalize(n.cross(&trial))
}

/// Intersects a sphere with a plane.
///
/// The circle center is the orthogonal projection of the sphere center onto
/// the plane; the circle radius is `sqrt(R^2 - d^2)`. Tangency and disjoint
/// configurations are errors: the planner treats them as infeasible input.
pub fn intersect_sphere_plane(s: &Sphere, p: &Plane) -> Result<Arc, GeometryError> {
    let d = p.signed_distance(&s.center);
    if d.abs() >= s.radius {
        return Err(GeometryError::NoIntersection);
    }
    let center = p.project_point(&s.center);
    let radius = (s.radius * s.radius - d * d).sqrt();
    let u = orthogonal_unit(&p.normal);
    let v = Unit::new_normalize(p.normal.cross(&u));
    Ok(Arc {
        center,
        radius,
        plane_normal: p.normal,
        u,
        v,
    })
}

/// Rotates an in-plane direction about the plane's normal.
///
/// Positive angles rotate counter-clockwise about `p.normal`. The pivot is
/// carried by the caller (the rotated ray's origin); only the direction
/// changes here, but both must lie in the plane.
pub fn rotate_direction_in_plane(
    dir: &Unit<Vector3<f64>>,
    pivot: &Point3<f64>,
    angle: f64,
    p: &Plane,
) -> Result<Unit<Vector3<f64>>, GeometryError> {
    if !p.contains_vector(dir, GEOM_TOL) {
        return Err(GeometryError::DirectionNotInPlane);
    }
    if p.signed_distance(pivot).abs() > BOUNDARY_TOL {
        return Err(GeometryError::DirectionNotInPlane);
    }
    let (s, c) = angle.sin_cos();
    let n = p.normal.into_inner();
    // Rodrigues with dir . n = 0.
    let rotated = dir.into_inner() * c + n.cross(dir) * s;
    Ok(Unit::new_normalize(rotated))
}

/// Intersects an in-plane ray with the arc's circle.
///
/// Returns 0, 1, or 2 points with nonnegative ray parameter, nearest first.
/// A double root (tangency) yields one point.
pub fn intersect_ray_arc(
    origin: &Point3<f64>,
    dir: &Unit<Vector3<f64>>,
    arc: &Arc,
) -> Result<Vec<Point3<f64>>, GeometryError> {
    let plane = arc.plane();
    if plane.signed_distance(origin).abs() > BOUNDARY_TOL
        || !plane.contains_vector(dir, BOUNDARY_TOL)
    {
        return Err(GeometryError::RayNotInPlane);
    }
    // Solve |o + t d - c|^2 = r^2 with |d| = 1.
    let oc = origin - arc.center;
    let b = oc.dot(dir);
    let c = oc.norm_squared() - arc.radius * arc.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return Ok(Vec::new());
    }
    let sq = disc.sqrt();
    let mut hits = Vec::with_capacity(2);
    let t0 = -b - sq;
    let t1 = -b + sq;
    // Snap parameters within tolerance of zero onto the origin.
    for t in [t0, t1] {
        let t = if t.abs() <= GEOM_TOL { 0.0 } else { t };
        if t >= 0.0 {
            hits.push(origin + dir.into_inner() * t);
        }
    }
    if hits.len() == 2 && (t1 - t0).abs() <= GEOM_TOL {
        hits.pop();
    }
    Ok(hits)
}
