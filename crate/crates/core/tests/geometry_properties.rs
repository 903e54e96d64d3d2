//! Property tests for the geometric core: group laws, projection
//! round-trips, and membership invariants of the arc constructions.

use nalgebra::{Matrix3, Point3, Unit, Vector3};
use proptest::prelude::*;

use picksim_core::geometry::{
    backproject, intersect_ray_arc, intersect_sphere_plane, project, rotate_direction_in_plane,
    Intrinsics, Plane, Pose, Sphere,
};

fn arb_pose() -> impl Strategy<Value = Pose> {
    (
        -1.0..1.0f64,
        -1.0..1.0f64,
        -1.0..1.0f64,
        -3.0..3.0f64,
        -500.0..500.0f64,
        -500.0..500.0f64,
        -500.0..500.0f64,
    )
        .prop_filter_map("axis must not vanish", |(ax, ay, az, angle, tx, ty, tz)| {
            let axis = Vector3::new(ax, ay, az);
            if axis.norm() < 1e-3 {
                return None;
            }
            let rot = Pose::from_axis_angle(&Unit::new_normalize(axis), angle);
            Some(Pose::from_parts(
                rot.rotation().to_owned(),
                Vector3::new(tx, ty, tz),
            ))
        })
}

fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
    (a.rotation() - b.rotation()).norm() <= tol
        && (a.translation() - b.translation()).norm() <= tol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!(pose_close(&left, &right, 1e-9));
    }

    #[test]
    fn inverse_cancels(p in arb_pose()) {
        prop_assert!(pose_close(&p.compose(&p.invert()), &Pose::identity(), 1e-9));
        prop_assert!(pose_close(&p.invert().compose(&p), &Pose::identity(), 1e-9));
    }

    #[test]
    fn long_chains_stay_orthonormal(p in arb_pose(), len in 1usize..100) {
        let mut acc = Pose::identity();
        for _ in 0..len {
            acc = acc.compose(&p);
        }
        let r = acc.rotation();
        prop_assert!((r.transpose() * r - Matrix3::identity()).norm() <= 1e-9);
    }

    #[test]
    fn projection_round_trips(
        px in 0.0..640.0f64,
        py in 0.0..480.0f64,
        depth in 1.0..5000.0f64,
    ) {
        let k = Intrinsics::new(612.3, 595.7, 321.0, 238.5, 640, 480);
        let p = backproject(&k, [px, py], depth).unwrap();
        let ([qx, qy], d) = project(&k, &p).unwrap();
        prop_assert!((qx - px).abs() <= 1e-9);
        prop_assert!((qy - py).abs() <= 1e-9);
        prop_assert!((d - depth).abs() <= 1e-9);
    }

    #[test]
    fn camera_points_round_trip(
        x in -400.0..400.0f64,
        y in -300.0..300.0f64,
        z in 1.0..2000.0f64,
    ) {
        let k = Intrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480);
        let p = Point3::new(x, y, z);
        let (pix, depth) = project(&k, &p).unwrap();
        let q = backproject(&k, pix, depth).unwrap();
        prop_assert!((q - p).norm() <= 1e-9);
    }

    #[test]
    fn arc_points_lie_on_sphere_and_plane(
        cx in -200.0..200.0f64,
        cy in -200.0..200.0f64,
        cz in -200.0..200.0f64,
        nx in -1.0..1.0f64,
        ny in -1.0..1.0f64,
        nz in -1.0..1.0f64,
        radius in 10.0..500.0f64,
        offset_frac in -0.95..0.95f64,
        theta in -6.3..6.3f64,
    ) {
        let n = Vector3::new(nx, ny, nz);
        prop_assume!(n.norm() > 1e-3);
        let sphere = Sphere::new(Point3::new(cx, cy, cz), radius);
        let normal = Unit::new_normalize(n);
        let plane_point = sphere.center + normal.into_inner() * (radius * offset_frac);
        let plane = Plane::new(plane_point, normal.into_inner());
        let arc = intersect_sphere_plane(&sphere, &plane).unwrap();
        let p = arc.point_at(theta);
        prop_assert!(((p - sphere.center).norm() - radius).abs() <= 1e-9);
        prop_assert!(plane.signed_distance(&p).abs() <= 1e-9);
    }

    #[test]
    fn rotated_directions_stay_unit_and_in_plane(
        angle in -6.3..6.3f64,
        dx in -1.0..1.0f64,
        dy in -1.0..1.0f64,
        nx in -1.0..1.0f64,
        ny in -1.0..1.0f64,
        nz in 0.1..1.0f64,
    ) {
        let n = Vector3::new(nx, ny, nz);
        prop_assume!(n.norm() > 1e-3);
        let normal = Unit::new_normalize(n);
        let plane = Plane::new(Point3::origin(), normal.into_inner());
        // Build an in-plane direction.
        let raw = Vector3::new(dx, dy, 0.0);
        let in_plane = raw - normal.into_inner() * raw.dot(&normal);
        prop_assume!(in_plane.norm() > 1e-3);
        let dir = Unit::new_normalize(in_plane);
        let rotated = rotate_direction_in_plane(&dir, &Point3::origin(), angle, &plane).unwrap();
        prop_assert!((rotated.norm() - 1.0).abs() <= 1e-12);
        prop_assert!(rotated.dot(&normal).abs() <= 1e-9);
        // The turned angle matches |angle| modulo the circle.
        let expected = angle.cos();
        prop_assert!((rotated.dot(&dir) - expected).abs() <= 1e-9);
    }

    #[test]
    fn ray_arc_hits_are_sorted_members(
        ox in -400.0..400.0f64,
        oy in -400.0..400.0f64,
        dx in -1.0..1.0f64,
        dy in -1.0..1.0f64,
        radius in 50.0..300.0f64,
    ) {
        let d = Vector3::new(dx, dy, 0.0);
        prop_assume!(d.norm() > 1e-3);
        let arc = intersect_sphere_plane(
            &Sphere::new(Point3::origin(), radius),
            &Plane::new(Point3::origin(), Vector3::z()),
        )
        .unwrap();
        let origin = Point3::new(ox, oy, 0.0);
        let dir = Unit::new_normalize(d);
        let hits = intersect_ray_arc(&origin, &dir, &arc).unwrap();
        prop_assert!(hits.len() <= 2);
        let mut last_param = -1e-9;
        for h in &hits {
            prop_assert!(((h - arc.center).norm() - radius).abs() <= 1e-9);
            prop_assert!(h.z.abs() <= 1e-9);
            let param = (h - origin).dot(&dir);
            prop_assert!(param >= -1e-9, "negative ray parameter {param}");
            prop_assert!(param >= last_param, "hits out of order");
            last_param = param;
        }
    }
}
