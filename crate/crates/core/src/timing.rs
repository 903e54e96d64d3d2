//! Sensing-time model and takt accounting.
//!
//! The sensing scheme's duration decomposes into per-view costs (exposure,
//! image transfer, kinematics acquisition, per-view 3D generation, fusion
//! share), capture intervals, and per-cycle costs (pose estimation, path
//! planning). Because sensing runs in parallel with the robot's place
//! action, only the portion exceeding the place duration is charged to takt
//! time, plus the extra motion the sensing detour adds.

use nalgebra::Point3;

use crate::geometry::Arc;

/// Per-component time constants in ms, stored separately so the aggregate
/// coefficients can be re-derived and audited.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingBreakdown {
    pub exposure_ms_per_view: u64,
    pub transfer_ms_per_view: u64,
    pub kinematics_ms_per_view: u64,
    pub gen3d_ms_per_view: u64,
    pub fusion_ms_per_view: u64,
    pub estimation_ms: u64,
    pub path_planning_ms: u64,
    pub interval_t_ms: u64,
    pub n_views: u64,
}

impl TimingBreakdown {
    pub fn new(n_views: u64, interval_t_ms: u64) -> Self {
        Self {
            exposure_ms_per_view: 3,
            transfer_ms_per_view: 90,
            kinematics_ms_per_view: 20,
            gen3d_ms_per_view: 150,
            fusion_ms_per_view: 80,
            estimation_ms: 200,
            path_planning_ms: 20,
            interval_t_ms,
            n_views,
        }
    }

    /// Sum of the per-view component costs (the coefficient of n).
    pub fn per_view_ms(&self) -> u64 {
        self.exposure_ms_per_view
            + self.transfer_ms_per_view
            + self.kinematics_ms_per_view
            + self.gen3d_ms_per_view
            + self.fusion_ms_per_view
    }

    /// Sum of the per-cycle fixed costs (the constant term).
    pub fn fixed_ms(&self) -> u64 {
        self.estimation_ms + self.path_planning_ms
    }

    /// Total sensing-scheme duration recomputed from the parts.
    pub fn total_ms(&self) -> u64 {
        self.per_view_ms() * self.n_views
            + self.interval_t_ms * self.n_views.saturating_sub(1)
            + self.fixed_ms()
    }
}

/// Total sensing time in ms: `343 n + t (n - 1) + 220`.
pub fn sensing_time(n: u64, t_ms: u64) -> u64 {
    343 * n + t_ms * n.saturating_sub(1) + 220
}

/// How a cycle's sensing cost lands in takt time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaktAccount {
    pub place_duration_ms: f64,
    pub sensing_total_ms: f64,
    /// Time for the detour B-M-N-C over the direct B-C at the given speed.
    pub extra_path_ms: f64,
    /// What the cycle actually pays: the non-absorbed sensing overhang plus
    /// the detour.
    pub charged_ms: f64,
}

/// The place action absorbs sensing up to its own duration; the overhang
/// and the extra motion are charged.
pub fn takt_contribution(
    breakdown: &TimingBreakdown,
    place_duration_ms: f64,
    extra_path_ms: f64,
) -> TaktAccount {
    let sensing_total_ms = breakdown.total_ms() as f64;
    let charged_ms = (sensing_total_ms - place_duration_ms).max(0.0) + extra_path_ms;
    TaktAccount {
        place_duration_ms,
        sensing_total_ms,
        extra_path_ms,
        charged_ms,
    }
}

/// Extra motion time of the sensing detour: path B -> M -> (arc) -> N -> C
/// versus the straight line B -> C, at speed `v` (fraction of 1 m/s).
/// The M-to-N leg is measured along the minor arc of the sensing circle.
pub fn extra_path_time(
    b: &Point3<f64>,
    m: &Point3<f64>,
    n: &Point3<f64>,
    c: &Point3<f64>,
    arc: &Arc,
    v: f64,
) -> f64 {
    assert!(v > 0.0, "speed must be positive");
    let raw = (arc.angle_of(n) - arc.angle_of(m)).abs();
    let angle = raw.min(std::f64::consts::TAU - raw);
    let detour = (m - b).norm() + arc.radius * angle + (c - n).norm() - (c - b).norm();
    // mm / (v mm/ms); triangle inequality keeps this nonnegative up to
    // rounding.
    (detour / v).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{intersect_sphere_plane, Plane, Sphere};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn sensing_time_reference_values() {
        assert_eq!(sensing_time(4, 30), 1682);
        assert_eq!(sensing_time(1, 0), 563);
        assert_eq!(sensing_time(1, 999), 563);
        // 343*3 + 60*2 + 220 = 1029 + 120 + 220.
        assert_eq!(sensing_time(3, 60), 1369);
    }

    #[test]
    fn breakdown_rederives_the_aggregate_coefficients() {
        let b = TimingBreakdown::new(4, 30);
        assert_eq!(b.per_view_ms(), 343);
        assert_eq!(b.fixed_ms(), 220);
        assert_eq!(b.total_ms(), sensing_time(4, 30));
        for (n, t) in [(1u64, 10u64), (2, 80), (7, 25), (10, 80)] {
            assert_eq!(TimingBreakdown::new(n, t).total_ms(), sensing_time(n, t));
        }
    }

    #[test]
    fn sensing_time_is_affine() {
        for t in [0u64, 10, 30, 80] {
            for n in 1..9u64 {
                assert_eq!(
                    sensing_time(n + 1, t) - sensing_time(n, t),
                    343 + t,
                    "n step at t={t}"
                );
            }
        }
    }

    #[test]
    fn takt_contribution_cases() {
        let b = TimingBreakdown::new(4, 30); // 1682 ms
        let absorbed = takt_contribution(&b, 2000.0, 0.0);
        assert_eq!(absorbed.charged_ms, 0.0);

        let spill = takt_contribution(&b, 1500.0, 100.0);
        assert_relative_eq!(spill.charged_ms, 282.0, epsilon = 1e-12);

        let zero_sensing = TimingBreakdown {
            exposure_ms_per_view: 0,
            transfer_ms_per_view: 0,
            kinematics_ms_per_view: 0,
            gen3d_ms_per_view: 0,
            fusion_ms_per_view: 0,
            estimation_ms: 0,
            path_planning_ms: 0,
            interval_t_ms: 0,
            n_views: 0,
        };
        let only_path = takt_contribution(&zero_sensing, 500.0, 77.0);
        assert_eq!(only_path.charged_ms, 77.0);
    }

    fn arc_in_z0() -> Arc {
        intersect_sphere_plane(
            &Sphere::new(Point3::origin(), 300.0),
            &Plane::new(Point3::origin(), Vector3::z()),
        )
        .unwrap()
    }

    #[test]
    fn no_detour_costs_nothing() {
        let arc = arc_in_z0();
        let b = Point3::new(0.0, 300.0, 0.0);
        let c = Point3::new(500.0, 300.0, 0.0);
        // M = N = B on segment BC: detour collapses onto the chord.
        assert_eq!(extra_path_time(&b, &b, &b, &c, &arc, 0.5), 0.0);
    }

    #[test]
    fn detour_time_matches_hand_arithmetic() {
        // 63.5 mm of extra distance at 0.1 (100 mm/s) is 635 ms:
        // B, C, M collinear with M overshooting C by 31.75 mm, so
        // |B-M| + |M-C| - |B-C| = 68.25 + 31.75 - 36.5 = 63.5 mm
        // (zero-length arc, M = N).
        let arc = arc_in_z0();
        let b = Point3::new(-100.0, 0.0, 0.0);
        let c = Point3::new(-136.5, 0.0, 0.0);
        let m = Point3::new(-168.25, 0.0, 0.0);
        let t = extra_path_time(&b, &m, &m, &c, &arc, 0.1);
        assert_relative_eq!(t, 635.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_point_path_on_the_chord_costs_zero() {
        // M = N on the segment BC: |B-M| + |N-C| = |B-C| exactly.
        let arc = arc_in_z0();
        let b = Point3::new(0.0, 400.0, 0.0);
        let m = Point3::new(150.0, 400.0, 0.0);
        let c = Point3::new(500.0, 400.0, 0.0);
        let t = extra_path_time(&b, &m, &m, &c, &arc, 0.4);
        assert_relative_eq!(t, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn arc_leg_uses_the_minor_arc() {
        let arc = arc_in_z0();
        let m = arc.point_at(0.0);
        let n = arc.point_at(0.5);
        let b = m;
        let c = n;
        // Detour = arc(M,N) - chord(M,N); 300 * 0.5 vs 2*300*sin(0.25).
        let expected = (300.0 * 0.5 - 2.0 * 300.0 * (0.25f64).sin()) / 0.4;
        let t = extra_path_time(&b, &m, &n, &c, &arc, 0.4);
        assert_relative_eq!(t, expected, epsilon = 1e-9);
    }

    #[test]
    fn charged_is_monotone() {
        let mk = |n: u64, t: u64| TimingBreakdown::new(n, t);
        let base = takt_contribution(&mk(4, 30), 1500.0, 50.0).charged_ms;
        assert!(takt_contribution(&mk(4, 30), 1600.0, 50.0).charged_ms <= base);
        assert!(takt_contribution(&mk(5, 30), 1500.0, 50.0).charged_ms >= base);
        assert!(takt_contribution(&mk(4, 30), 1500.0, 60.0).charged_ms >= base);
    }
}
