//! Multi-view depth fusion on a single target depth image.
//!
//! Depth maps captured in motion are reprojected into the reference view,
//! collected per target pixel as depth candidates, and resolved by voting:
//! a sample within the merge threshold of an existing candidate joins it
//! (running average, vote incremented), otherwise it starts a new candidate;
//! the candidate with the most votes wins the pixel. Reported sensor poses
//! carry synchronization error, so each non-reference view is first refined
//! by point-to-point ICP against the reference view's cloud.

use nalgebra::{Matrix3, Point3, Vector3};
use smallvec::SmallVec;
use std::collections::HashMap;
use thiserror::Error;

use crate::depth::DepthImage;
use crate::geometry::{backproject, project, Intrinsics, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("point cloud has fewer than 3 non-collinear points")]
    DegenerateCloud,
    #[error("view set is invalid: {0}")]
    InvalidViewSet(String),
}

/// Ordered views sharing one set of intrinsics. The reference view (default
/// the first) was captured at a synchronized stop, so its pose is exact and
/// anchors the fused output's frame.
#[derive(Debug, Clone)]
pub struct ViewSet {
    views: Vec<(DepthImage, Pose)>,
    intrinsics: Intrinsics,
    reference_index: usize,
}

impl ViewSet {
    pub fn new(
        views: Vec<(DepthImage, Pose)>,
        intrinsics: Intrinsics,
        reference_index: usize,
    ) -> Result<Self, FusionError> {
        if views.is_empty() {
            return Err(FusionError::InvalidViewSet("no views".into()));
        }
        if reference_index >= views.len() {
            return Err(FusionError::InvalidViewSet(format!(
                "reference index {} out of range for {} views",
                reference_index,
                views.len()
            )));
        }
        let (w, h) = (views[0].0.width(), views[0].0.height());
        if views.iter().any(|(img, _)| img.width() != w || img.height() != h) {
            return Err(FusionError::InvalidViewSet("mismatched image sizes".into()));
        }
        if w != intrinsics.width || h != intrinsics.height {
            return Err(FusionError::InvalidViewSet(
                "image size disagrees with intrinsics".into(),
            ));
        }
        Ok(Self {
            views,
            intrinsics,
            reference_index,
        })
    }

    pub fn views(&self) -> &[(DepthImage, Pose)] {
        &self.views
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn reference_index(&self) -> usize {
        self.reference_index
    }

    pub fn reference(&self) -> &(DepthImage, Pose) {
        &self.views[self.reference_index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// Candidate merge threshold in mm (2 x sensor accuracy).
    pub delta: f64,
    pub icp_enabled: bool,
    pub icp_max_iterations: usize,
    /// ICP stops once the pose update moves the cloud less than this (mm RMS).
    pub icp_convergence: f64,
    /// Pixels whose winning candidate has fewer votes stay invalid.
    pub min_votes: u32,
    /// ICP runs on every k-th valid pixel.
    pub icp_subsample: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            delta: 2.0,
            icp_enabled: true,
            icp_max_iterations: 10,
            icp_convergence: 0.05,
            min_votes: 1,
            icp_subsample: 16,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.delta <= 0.0 {
            return Err(FusionError::InvalidViewSet("delta must be > 0".into()));
        }
        if self.icp_max_iterations == 0 {
            return Err(FusionError::InvalidViewSet(
                "icp_max_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One depth hypothesis at a target pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub mean: f64,
    pub votes: u32,
}

/// The per-pixel candidate list of the voting step. New candidates are only
/// inserted at least `delta` away from every existing mean; merged samples
/// shift a candidate's mean by the running average.
#[derive(Debug, Clone, Default)]
pub struct CandidateCell {
    candidates: SmallVec<[Candidate; 4]>,
}

impl CandidateCell {
    /// Merges a sample with the first candidate within `delta` of its mean,
    /// or inserts a new candidate.
    pub fn absorb(&mut self, depth: f64, delta: f64) {
        for cand in self.candidates.iter_mut() {
            if (depth - cand.mean).abs() < delta {
                // An equal sample leaves the running average unchanged;
                // skipping the update keeps repeated fusion exact.
                if depth != cand.mean {
                    cand.mean =
                        (cand.mean * f64::from(cand.votes) + depth) / f64::from(cand.votes + 1);
                }
                cand.votes += 1;
                return;
            }
        }
        self.candidates.push(Candidate { mean: depth, votes: 1 });
    }

    /// Winner by vote count; ties prefer the nearer surface.
    pub fn winner(&self) -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for cand in &self.candidates {
            best = Some(match best {
                None => *cand,
                Some(b) if cand.votes > b.votes || (cand.votes == b.votes && cand.mean < b.mean) => {
                    *cand
                }
                Some(b) => b,
            });
        }
        best
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }
}

/// Result of reprojecting one source view into the target view.
#[derive(Debug, Clone)]
pub struct Reprojection {
    /// `(x, y, depth)` samples in row-major target order, one per pixel at
    /// most (occluded samples within the view are z-buffered away).
    pub samples: Vec<(u32, u32, f64)>,
    /// Samples landing outside the frame or behind the camera.
    pub dropped: usize,
    /// Samples displaced by a nearer sample on the same target pixel.
    pub shadowed: usize,
}

/// Reprojects every valid pixel of `src` into the target view.
pub fn reproject_into_target(
    src: &DepthImage,
    src_pose: &Pose,
    tgt_pose: &Pose,
    k: &Intrinsics,
) -> Reprojection {
    let relative = if src_pose == tgt_pose {
        Pose::identity()
    } else {
        tgt_pose.invert().compose(src_pose)
    };
    reproject_with_transform(src, &relative, k)
}

/// Reprojection with an explicit source-to-target camera transform.
pub fn reproject_with_transform(
    src: &DepthImage,
    relative: &Pose,
    k: &Intrinsics,
) -> Reprojection {
    let (w, h) = (src.width(), src.height());
    if relative.is_identity() {
        // Identity mapping is exact by construction; pixels keep their
        // coordinates and depths without a projective round trip.
        let samples = src.iter_valid().collect();
        return Reprojection {
            samples,
            dropped: 0,
            shadowed: 0,
        };
    }
    let mut buffer = vec![f64::INFINITY; src.len()];
    let mut dropped = 0usize;
    let mut shadowed = 0usize;
    for (x, y, d) in src.iter_valid() {
        let p_src = backproject(k, [f64::from(x), f64::from(y)], d).expect("valid depth");
        let p_tgt = relative.apply(&p_src);
        let Ok(([px, py], depth)) = project(k, &p_tgt) else {
            dropped += 1;
            continue;
        };
        let (ix, iy) = (px.round(), py.round());
        if ix < 0.0 || iy < 0.0 || ix >= f64::from(w) || iy >= f64::from(h) {
            dropped += 1;
            continue;
        }
        let idx = (iy as usize) * (w as usize) + (ix as usize);
        if depth < buffer[idx] {
            if buffer[idx].is_finite() {
                shadowed += 1;
            }
            buffer[idx] = depth;
        } else {
            shadowed += 1;
        }
    }
    let mut samples = Vec::new();
    for (idx, depth) in buffer.iter().enumerate() {
        if depth.is_finite() {
            samples.push(((idx % w as usize) as u32, (idx / w as usize) as u32, *depth));
        }
    }
    Reprojection {
        samples,
        dropped,
        shadowed,
    }
}

/// Outcome of an ICP refinement.
#[derive(Debug, Clone)]
pub struct IcpAlignment {
    /// Corrected transform mapping source points into the target frame.
    pub pose: Pose,
    pub residual_rms: f64,
    pub initial_rms: f64,
    pub iterations: usize,
}

/// Uniform hash grid for nearest-neighbor queries within one cell radius.
struct NeighborGrid {
    cells: HashMap<(i32, i32, i32), Vec<usize>>,
    points: Vec<Point3<f64>>,
    cell_size: f64,
}

impl NeighborGrid {
    fn build(points: Vec<Point3<f64>>, cell_size: f64) -> Self {
        let mut cells: HashMap<(i32, i32, i32), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, cell_size)).or_default().push(i);
        }
        Self {
            cells,
            points,
            cell_size,
        }
    }

    fn key(p: &Point3<f64>, cell: f64) -> (i32, i32, i32) {
        (
            (p.x / cell).floor() as i32,
            (p.y / cell).floor() as i32,
            (p.z / cell).floor() as i32,
        )
    }

    /// Nearest stored point within `cell_size` of `q`, if any.
    fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        let (kx, ky, kz) = Self::key(q, self.cell_size);
        let mut best: Option<(usize, f64)> = None;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(bucket) = self.cells.get(&(kx + dx, ky + dy, kz + dz)) else {
                        continue;
                    };
                    for &i in bucket {
                        let d2 = (self.points[i] - q).norm_squared();
                        if best.is_none_or(|(_, b)| d2 < b) {
                            best = Some((i, d2));
                        }
                    }
                }
            }
        }
        let limit = self.cell_size * self.cell_size;
        best.and_then(|(i, d2)| (d2 <= limit).then(|| (i, d2.sqrt())))
    }
}

fn is_degenerate(points: &[Point3<f64>]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let a = points[0];
    // Farthest point from a, then largest triangle area with that edge.
    let mut far = a;
    let mut far_d = 0.0;
    for p in points {
        let d = (p - a).norm_squared();
        if d > far_d {
            far_d = d;
            far = *p;
        }
    }
    if far_d == 0.0 {
        return true;
    }
    let edge = far - a;
    let mut max_cross = 0.0f64;
    for p in points {
        max_cross = max_cross.max(edge.cross(&(p - a)).norm());
    }
    // Collinear when the largest triangle is flat relative to the edge scale.
    max_cross <= far_d * 1e-9
}

fn kabsch(src: &[Point3<f64>], tgt: &[Point3<f64>]) -> Option<Pose> {
    debug_assert_eq!(src.len(), tgt.len());
    let n = src.len() as f64;
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for (s, t) in src.iter().zip(tgt) {
        cs += s.coords;
        ct += t.coords;
    }
    cs /= n;
    ct /= n;
    let mut h = Matrix3::zeros();
    for (s, t) in src.iter().zip(tgt) {
        h += (t.coords - ct) * (s.coords - cs).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let translation = ct - rotation * cs;
    Some(Pose::from_parts(rotation, translation))
}

/// Point-to-point ICP with nearest-neighbor correspondences and a
/// closed-form SVD update per iteration.
///
/// Runs from `init` until `icp_max_iterations` or until a pose update moves
/// the source cloud less than `icp_convergence` (mm RMS). The pose with the
/// lowest correspondence RMS seen along the way is returned, so the result
/// never regresses below the initial alignment.
pub fn icp_align(
    src_points: &[Point3<f64>],
    tgt_points: &[Point3<f64>],
    init: &Pose,
    cfg: &FusionConfig,
) -> Result<IcpAlignment, FusionError> {
    if is_degenerate(src_points) || is_degenerate(tgt_points) {
        return Err(FusionError::DegenerateCloud);
    }
    let search_radius = (2.0 * cfg.delta).max(4.0);
    let grid = NeighborGrid::build(tgt_points.to_vec(), search_radius);

    type Pairs = Vec<(Point3<f64>, Point3<f64>)>;
    let correspondences = |pose: &Pose| -> (Pairs, f64) {
        let mut pairs = Vec::new();
        let mut sum_sq = 0.0;
        for s in src_points {
            let moved = pose.apply(s);
            if let Some((j, dist)) = grid.nearest(&moved) {
                sum_sq += dist * dist;
                pairs.push((*s, grid.points[j]));
            }
        }
        let rms = if pairs.is_empty() {
            f64::INFINITY
        } else {
            (sum_sq / pairs.len() as f64).sqrt()
        };
        (pairs, rms)
    };

    let (mut pairs, initial_rms) = correspondences(init);
    let mut best_pose = *init;
    let mut best_rms = initial_rms;
    let mut current = *init;
    let mut iterations = 0;
    if initial_rms == 0.0 {
        // Already a fixed point; re-solving would only stir rounding noise.
        return Ok(IcpAlignment {
            pose: current,
            residual_rms: 0.0,
            initial_rms,
            iterations,
        });
    }
    for _ in 0..cfg.icp_max_iterations {
        if pairs.len() < 3 {
            break;
        }
        let (src_m, tgt_m): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let Some(updated) = kabsch(&src_m, &tgt_m) else {
            break;
        };
        iterations += 1;
        // RMS displacement of the subsampled cloud under the pose change.
        let shift = {
            let mut sum = 0.0;
            for s in src_points {
                sum += (updated.apply(s) - current.apply(s)).norm_squared();
            }
            (sum / src_points.len() as f64).sqrt()
        };
        current = updated;
        let (new_pairs, rms) = correspondences(&current);
        pairs = new_pairs;
        if rms < best_rms {
            best_rms = rms;
            best_pose = current;
        }
        if shift < cfg.icp_convergence {
            break;
        }
    }
    Ok(IcpAlignment {
        pose: best_pose,
        residual_rms: best_rms,
        initial_rms,
        iterations,
    })
}

/// Diagnostics accumulated across one fusion run.
#[derive(Debug, Clone, Default)]
pub struct FusionDiagnostics {
    /// Reprojected samples that fell outside the target frame or behind it.
    pub dropped_samples: usize,
    /// Views skipped because their cloud was too degenerate for ICP.
    pub skipped_views: Vec<usize>,
    /// `votes_histogram[v]` counts output pixels whose winner had `v` votes.
    pub votes_histogram: Vec<usize>,
    /// Per-view ICP residual RMS (reference view and skipped views omitted).
    pub icp_residuals: Vec<(usize, f64)>,
}

/// Backprojects every `step`-th valid pixel into the camera frame.
fn subsampled_cloud(img: &DepthImage, k: &Intrinsics, step: usize) -> Vec<Point3<f64>> {
    let step = step.max(1);
    img.iter_valid()
        .enumerate()
        .filter(|(i, _)| i % step == 0)
        .map(|(_, (x, y, d))| {
            backproject(k, [f64::from(x), f64::from(y)], d).expect("valid depth")
        })
        .collect()
}

/// Fuses all views into a single depth image in the reference view's frame.
pub fn fuse(views: &ViewSet, cfg: &FusionConfig) -> DepthImage {
    fuse_with_diagnostics(views, cfg).0
}

pub fn fuse_with_diagnostics(views: &ViewSet, cfg: &FusionConfig) -> (DepthImage, FusionDiagnostics) {
    let k = views.intrinsics();
    let (ref_img, ref_pose) = views.reference();
    let mut diags = FusionDiagnostics::default();

    let ref_cloud = if cfg.icp_enabled && views.views().len() > 1 {
        subsampled_cloud(ref_img, k, cfg.icp_subsample)
    } else {
        Vec::new()
    };

    let mut cells: Vec<CandidateCell> = vec![CandidateCell::default(); ref_img.len()];
    let w = ref_img.width() as usize;

    for (view_idx, (img, pose)) in views.views().iter().enumerate() {
        let mut relative = if view_idx == views.reference_index() || pose == ref_pose {
            Pose::identity()
        } else {
            ref_pose.invert().compose(pose)
        };
        if cfg.icp_enabled && view_idx != views.reference_index() && !relative.is_identity() {
            let src_cloud = subsampled_cloud(img, k, cfg.icp_subsample);
            match icp_align(&src_cloud, &ref_cloud, &relative, cfg) {
                Ok(alignment) => {
                    diags.icp_residuals.push((view_idx, alignment.residual_rms));
                    relative = alignment.pose;
                }
                Err(FusionError::DegenerateCloud) => {
                    log::warn!("view {view_idx}: cloud too degenerate for ICP; view skipped");
                    diags.skipped_views.push(view_idx);
                    continue;
                }
                Err(_) => unreachable!("icp_align only fails on degenerate clouds"),
            }
        }
        let reproj = reproject_with_transform(img, &relative, k);
        diags.dropped_samples += reproj.dropped;
        for (x, y, d) in reproj.samples {
            cells[(y as usize) * w + (x as usize)].absorb(d, cfg.delta);
        }
    }

    let mut out = DepthImage::new(ref_img.width(), ref_img.height());
    for (idx, cell) in cells.iter().enumerate() {
        let Some(winner) = cell.winner() else { continue };
        if winner.votes < cfg.min_votes.max(1) {
            continue;
        }
        let (x, y) = ((idx % w) as u32, (idx / w) as u32);
        out.set(x, y, winner.mean);
        let v = winner.votes as usize;
        if diags.votes_histogram.len() <= v {
            diags.votes_histogram.resize(v + 1, 0);
        }
        diags.votes_histogram[v] += 1;
    }
    (out, diags)
}

/// Lifts the fused image into the robot frame through the reference sensor
/// pose (exact thanks to the synchronized capture stop).
pub fn to_robot_frame(
    fused: &DepthImage,
    k: &Intrinsics,
    reference_sensor_pose_in_robot: &Pose,
) -> Vec<Point3<f64>> {
    fused
        .iter_valid()
        .map(|(x, y, d)| {
            let p_cam = backproject(k, [f64::from(x), f64::from(y)], d).expect("valid depth");
            reference_sensor_pose_in_robot.apply(&p_cam)
        })
        .collect()
}
