//! Pinhole structure from motion over virtual-image measurements: two-view
//! bootstrap, incremental registration, triangulation and bundle adjustment.

mod centroids;
mod pinhole;

pub use centroids::{
    two_lens_virtual_depth, virtual_track_centroids, CentroidOptions, CentroidResult, ClusterFailure,
    PinholeMeasurement,
};
pub use pinhole::{pinhole_ba, PinholeBaOptions, PinholeSolution};

use std::collections::BTreeSet;

use log::{debug, warn};
use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::engine::{huber, SolveError, SolverOptions};
use crate::geometry::{decompose_essential, essential_eight_point, p3p, ray_angle, sampson_distance, triangulate_rays};
use crate::model::{skew, Pose};
use crate::par;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SfmError {
    #[error("{found} shared tracks, at least {required} needed")]
    InsufficientMatches { found: usize, required: usize },
    #[error("degenerate two-view geometry: {0}")]
    DegenerateGeometry(String),
    #[error("view {view} could not be registered ({inliers} inliers)")]
    RegistrationFailed { view: usize, inliers: usize },
    #[error("no view pair could be bootstrapped")]
    NoInitialPair,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("pinhole bundle adjustment failed: {0}")]
    Solve(#[from] SolveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacOptions {
    /// Inlier threshold, pixels.
    pub threshold_px: f64,
    pub confidence: f64,
    pub max_iter: usize,
}

impl RansacOptions {
    fn iterations_needed(&self, inlier_ratio: f64, sample_size: i32) -> usize {
        let w = inlier_ratio.clamp(1e-6, 1.0 - 1e-12).powi(sample_size);
        let n = (1.0 - self.confidence).ln() / (1.0 - w).ln();
        if n.is_finite() {
            (n.ceil() as usize).clamp(1, self.max_iter)
        } else {
            self.max_iter
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SfmOptions {
    /// Initial focal length in pixels; `None` uses `1.2·max(sensor)` and a
    /// coarse sweep around it on the first pair.
    pub f_px_guess: Option<f64>,
    /// Sensor size in pixels; its center is the initial principal point.
    pub sensor: (f64, f64),
    pub essential: RansacOptions,
    pub pnp: RansacOptions,
    /// Measurements farther than this from their reprojection are outliers.
    pub outlier_px: f64,
    pub min_triangulation_angle_deg: f64,
    /// Number of most-overlapping view pairs tried for bootstrapping.
    pub pair_candidates: usize,
    pub huber_px: f64,
    pub seed: u64,
}

impl Default for SfmOptions {
    fn default() -> Self {
        Self {
            f_px_guess: None,
            sensor: (2048.0, 2048.0),
            essential: RansacOptions {
                threshold_px: 1.5,
                confidence: 0.999,
                max_iter: 2000,
            },
            pnp: RansacOptions {
                threshold_px: 4.0,
                confidence: 0.999,
                max_iter: 1000,
            },
            outlier_px: 3.0,
            min_triangulation_angle_deg: 1.0,
            pair_candidates: 8,
            huber_px: 1.0,
            seed: 0,
        }
    }
}

/// Pinhole intrinsics used to turn pixels into bearings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinholeCamera {
    pub f: f64,
    pub c: Vector2<f64>,
}

impl PinholeCamera {
    pub fn bearing(&self, xy: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((xy.x - self.c.x) / self.f, (xy.y - self.c.y) / self.f, 1.0)
    }

    pub fn project(&self, x_c: &Vector3<f64>) -> Option<Vector2<f64>> {
        (x_c.z > 0.0).then(|| Vector2::new(self.f * x_c.x / x_c.z + self.c.x, self.f * x_c.y / x_c.z + self.c.y))
    }
}

/// Relative pose and structure of two views.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewResult {
    /// Pose of view b; view a is at the identity.
    pub pose_b: Pose,
    /// `(point id, position)` of triangulated inliers; median depth in view a is 1.
    pub points: Vec<(usize, Vector3<f64>)>,
    pub num_inliers: usize,
    /// Median angle between the two rays of the triangulated points, radians.
    pub median_angle: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    crate::ba::engine::median_in_place(&mut v)
}

/// Relative pose from `(point id, pixel)` lists of two views (sorted by point
/// id), via the normalized eight-point algorithm inside RANSAC.
pub fn two_view_bootstrap(
    meas_a: &[(usize, Vector2<f64>)],
    meas_b: &[(usize, Vector2<f64>)],
    camera: &PinholeCamera,
    options: &RansacOptions,
    rng: &mut ChaCha8Rng,
) -> Result<TwoViewResult, SfmError> {
    let mut ids = Vec::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < meas_a.len() && j < meas_b.len() {
        match meas_a[i].0.cmp(&meas_b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                ids.push(meas_a[i].0);
                a.push(camera.bearing(&meas_a[i].1));
                b.push(camera.bearing(&meas_b[j].1));
                i += 1;
                j += 1;
            }
        }
    }
    let n = ids.len();
    if n < 8 {
        return Err(SfmError::InsufficientMatches { found: n, required: 8 });
    }
    let thr = options.threshold_px / camera.f;
    let count = |e: &Matrix3<f64>| (0..n).filter(|k| sampson_distance(e, &a[*k], &b[*k]) < thr).count();

    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut needed = options.max_iter;
    let mut done = 0;
    const BATCH: usize = 32;
    while done < needed {
        let samples: Vec<Vec<usize>> = (0..BATCH).map(|_| sample(rng, n, 8).into_vec()).collect();
        let scored = par::map_slice(&samples, |s| {
            let sa: Vec<_> = s.iter().map(|k| a[*k]).collect();
            let sb: Vec<_> = s.iter().map(|k| b[*k]).collect();
            essential_eight_point(&sa, &sb).map(|(e, _)| (count(&e), e))
        });
        for (c, e) in scored.into_iter().flatten() {
            if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
                best = Some((c, e));
                needed = options.iterations_needed(c as f64 / n as f64, 8);
            }
        }
        done += BATCH;
    }
    let Some((_, e0)) = best else {
        return Err(SfmError::DegenerateGeometry("no essential matrix hypothesis".into()));
    };
    let inl: Vec<usize> = (0..n).filter(|k| sampson_distance(&e0, &a[*k], &b[*k]) < thr).collect();
    if inl.len() < 8 {
        return Err(SfmError::InsufficientMatches {
            found: inl.len(),
            required: 8,
        });
    }
    let ia: Vec<_> = inl.iter().map(|k| a[*k]).collect();
    let ib: Vec<_> = inl.iter().map(|k| b[*k]).collect();
    let (e, ambiguity) = essential_eight_point(&ia, &ib).unwrap_or((e0, 1.0));
    if ambiguity < 1e-7 {
        return Err(SfmError::DegenerateGeometry(format!(
            "essential matrix is not unique (singular value ratio {ambiguity:.1e})"
        )));
    }
    let inl: Vec<usize> = (0..n).filter(|k| sampson_distance(&e, &a[*k], &b[*k]) < thr).collect();

    // (points in front, pose, (point, X, angle) per triangulated track)
    #[allow(clippy::type_complexity)]
    let mut best_pose: Option<(usize, Pose, Vec<(usize, Vector3<f64>, f64)>)> = None;
    for (r, t) in decompose_essential(&e) {
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let pose = Pose::new(rot, t);
        let center = pose.center();
        let mut pts = Vec::new();
        for &k in &inl {
            let da = a[k];
            let db = rot.inverse() * b[k];
            if let Some(x) = triangulate_rays(&[(Vector3::zeros(), da), (center, db)]) {
                if x.z > 0.0 && pose.transform(&x).z > 0.0 {
                    pts.push((k, x, ray_angle(&da, &db)));
                }
            }
        }
        if best_pose.as_ref().is_none_or(|(c, _, _)| pts.len() > *c) {
            best_pose = Some((pts.len(), pose, pts));
        }
    }
    let (_, mut pose, pts) = best_pose.expect("four candidates");
    if pts.len() < 8 {
        return Err(SfmError::DegenerateGeometry(
            "cheirality check left too few points".into(),
        ));
    }
    let median_angle = median(pts.iter().map(|p| p.2).collect());
    if median_angle < 1e-3_f64.to_radians() * 50.0 {
        return Err(SfmError::DegenerateGeometry(format!(
            "median parallax {:.4} deg is too small",
            median_angle.to_degrees()
        )));
    }
    let depth = median(pts.iter().map(|p| p.1.z).collect());
    pose.translation /= depth;
    Ok(TwoViewResult {
        pose_b: pose,
        points: pts.iter().map(|(k, x, _)| (ids[*k], x / depth)).collect(),
        num_inliers: inl.len(),
        median_angle,
    })
}

/// Levenberg-Marquardt refinement of a single pose against fixed points.
fn refine_pose(pose: Pose, pts: &[Vector3<f64>], obs: &[Vector2<f64>], cam: &PinholeCamera, huber_px: f64) -> Pose {
    let cost_of = |p: &Pose| -> f64 {
        pts.iter()
            .zip(obs)
            .map(|(x, o)| match cam.project(&p.transform(x)) {
                Some(u) => huber((u - o).norm_squared(), huber_px).0,
                None => 1e6,
            })
            .sum()
    };
    let mut pose = pose;
    let mut cost = cost_of(&pose);
    let mut lambda = 1e-4;
    for _ in 0..30 {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (x, o) in pts.iter().zip(obs) {
            let rx = pose.rotation * x;
            let xc = rx + pose.translation;
            if xc.z <= 0.0 {
                continue;
            }
            let (u, v) = (xc.x / xc.z, xc.y / xc.z);
            let r = Vector2::new(cam.f * u + cam.c.x, cam.f * v + cam.c.y) - o;
            let iz = cam.f / xc.z;
            let jx = nalgebra::Matrix2x3::new(iz, 0.0, -iz * u, 0.0, iz, -iz * v);
            let mut j = nalgebra::Matrix2x6::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jx * skew(&rx)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jx);
            let w = huber(r.norm_squared(), huber_px).1;
            h += j.transpose() * j * w;
            g += j.transpose() * r * w;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut hd = h;
            for k in 0..6 {
                hd[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(step) = hd.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 2.0;
                continue;
            };
            let cand = pose.retract(&step.fixed_rows::<3>(0).into(), &step.fixed_rows::<3>(3).into());
            let c = cost_of(&cand);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                pose = cand;
                cost = c;
                lambda /= 3.0;
                improved = rel > 1e-12;
                break;
            }
            lambda *= 2.0;
        }
        if !improved {
            break;
        }
    }
    pose
}

/// Absolute pose of a view from 2D-3D correspondences: P3P inside RANSAC,
/// then refinement on all inliers. Returns the pose and inlier flags.
pub fn absolute_pose(
    pts: &[Vector3<f64>],
    obs: &[Vector2<f64>],
    cam: &PinholeCamera,
    options: &RansacOptions,
    huber_px: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(Pose, Vec<bool>)> {
    let n = pts.len();
    if n < 4 {
        return None;
    }
    let bearings: Vec<Vector3<f64>> = obs.iter().map(|o| cam.bearing(o)).collect();
    let thr2 = options.threshold_px * options.threshold_px;
    let count = |p: &Pose| {
        pts.iter()
            .zip(obs)
            .filter(|(x, o)| {
                cam.project(&p.transform(x))
                    .is_some_and(|u| (u - *o).norm_squared() < thr2)
            })
            .count()
    };
    let mut best: Option<(usize, Pose)> = None;
    let mut needed = options.max_iter;
    let mut done = 0;
    const BATCH: usize = 32;
    while done < needed {
        let samples: Vec<Vec<usize>> = (0..BATCH).map(|_| sample(rng, n, 3).into_vec()).collect();
        let scored = par::map_slice(&samples, |s| {
            let w = [pts[s[0]], pts[s[1]], pts[s[2]]];
            let b = [bearings[s[0]], bearings[s[1]], bearings[s[2]]];
            p3p(&w, &b).into_iter().map(|p| (count(&p), p)).max_by_key(|(c, _)| *c)
        });
        for (c, p) in scored.into_iter().flatten() {
            if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
                best = Some((c, p));
                needed = options.iterations_needed(c as f64 / n as f64, 3);
            }
        }
        done += BATCH;
    }
    let (c, pose) = best?;
    if c < 4 {
        return None;
    }
    let flags = |p: &Pose| -> Vec<bool> {
        pts.iter()
            .zip(obs)
            .map(|(x, o)| {
                cam.project(&p.transform(x))
                    .is_some_and(|u| (u - o).norm_squared() < thr2)
            })
            .collect()
    };
    let mut pose = pose;
    let mut inl = flags(&pose);
    for _ in 0..2 {
        let ip: Vec<_> = (0..n).filter(|k| inl[*k]).map(|k| pts[k]).collect();
        let io: Vec<_> = (0..n).filter(|k| inl[*k]).map(|k| obs[k]).collect();
        pose = refine_pose(pose, &ip, &io, cam, huber_px);
        inl = flags(&pose);
    }
    Some((pose, inl))
}

struct Index {
    /// Measurement indices per view.
    by_view: Vec<Vec<usize>>,
    /// Measurement index range per point.
    by_point: Vec<std::ops::Range<usize>>,
}

impl Index {
    fn new(meas: &[PinholeMeasurement], num_views: usize, num_points: usize) -> Self {
        let mut by_view = vec![Vec::new(); num_views];
        let mut by_point = vec![0..0; num_points];
        let mut start = 0;
        for i in 0..meas.len() {
            by_view[meas[i].view].push(i);
            if i + 1 == meas.len() || meas[i + 1].point != meas[i].point {
                by_point[meas[i].point] = start..i + 1;
                start = i + 1;
            }
        }
        Self { by_view, by_point }
    }
}

fn camera_of(sol: &PinholeSolution) -> PinholeCamera {
    PinholeCamera {
        f: sol.f_px,
        c: Vector2::new(sol.c_x, sol.c_y),
    }
}

/// Triangulates every untriangulated point with at least two inlier
/// measurements in registered views. Measurements that disagree with the
/// triangulated point are flagged as outliers.
fn triangulate_new(sol: &mut PinholeSolution, index: &Index, options: &SfmOptions) -> usize {
    let cam = camera_of(sol);
    let min_angle = options.min_triangulation_angle_deg.to_radians();
    let thr = options.pnp.threshold_px;
    let candidates: Vec<usize> = (0..sol.points.len())
        .filter(|p| sol.points[*p].is_none())
        .filter(|p| {
            index.by_point[*p]
                .clone()
                .filter(|i| sol.inliers[*i] && sol.pose(sol.measurements[*i].view).is_some())
                .count()
                >= 2
        })
        .collect();
    let results = par::map_slice(&candidates, |&p| {
        let mut used: Vec<usize> = index.by_point[p]
            .clone()
            .filter(|i| sol.inliers[*i] && sol.pose(sol.measurements[*i].view).is_some())
            .collect();
        let mut rejected = Vec::new();
        loop {
            if used.len() < 2 {
                return (p, None, rejected);
            }
            let rays: Vec<_> = used
                .iter()
                .map(|i| {
                    let m = &sol.measurements[*i];
                    let pose = sol.pose(m.view).expect("registered");
                    crate::geometry::world_ray(&pose, &cam.bearing(&m.xy))
                })
                .collect();
            let Some(x) = triangulate_rays(&rays) else {
                return (p, None, rejected);
            };
            let errs: Vec<f64> = used
                .iter()
                .map(|i| {
                    let m = &sol.measurements[*i];
                    cam.project(&sol.pose(m.view).expect("registered").transform(&x))
                        .map(|u| (u - m.xy).norm())
                        .unwrap_or(f64::INFINITY)
                })
                .collect();
            let (worst, we) = errs
                .iter()
                .enumerate()
                .fold((0, 0.0), |acc, (k, e)| if *e > acc.1 { (k, *e) } else { acc });
            if we > thr {
                rejected.push(used.remove(worst));
                continue;
            }
            let mut max_angle: f64 = 0.0;
            for r in 0..rays.len() {
                for s in r + 1..rays.len() {
                    max_angle = max_angle.max(ray_angle(&rays[r].1, &rays[s].1));
                }
            }
            if max_angle < min_angle {
                return (p, None, Vec::new());
            }
            return (p, Some(x), rejected);
        }
    });
    let mut added = 0;
    for (p, x, rejected) in results {
        if let Some(x) = x {
            sol.points[p] = Some(x);
            for i in rejected {
                sol.inliers[i] = false;
            }
            added += 1;
        }
    }
    added
}

/// Registers `view` into the reconstruction and triangulates the points it
/// makes available.
pub fn incremental_register(
    solution: &PinholeSolution,
    view: usize,
    options: &SfmOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PinholeSolution, SfmError> {
    let index = Index::new(&solution.measurements, solution.poses.len(), solution.points.len());
    register_indexed(solution, &index, view, options, rng)
}

fn register_indexed(
    solution: &PinholeSolution,
    index: &Index,
    view: usize,
    options: &SfmOptions,
    rng: &mut ChaCha8Rng,
) -> Result<PinholeSolution, SfmError> {
    let corr: Vec<usize> = index
        .by_view
        .get(view)
        .map(|v| v.as_slice())
        .unwrap_or(&[])
        .iter()
        .copied()
        .filter(|i| solution.inliers[*i] && solution.point(solution.measurements[*i].point).is_some())
        .collect();
    if corr.len() < 4 {
        return Err(SfmError::RegistrationFailed {
            view,
            inliers: corr.len(),
        });
    }
    let pts: Vec<_> = corr
        .iter()
        .map(|i| solution.point(solution.measurements[*i].point).expect("filtered"))
        .collect();
    let obs: Vec<_> = corr.iter().map(|i| solution.measurements[*i].xy).collect();
    let cam = camera_of(solution);
    let Some((pose, inl)) = absolute_pose(&pts, &obs, &cam, &options.pnp, options.huber_px, rng) else {
        return Err(SfmError::RegistrationFailed { view, inliers: 0 });
    };
    let n_inl = inl.iter().filter(|f| **f).count();
    if n_inl < 4 {
        return Err(SfmError::RegistrationFailed { view, inliers: n_inl });
    }
    let mut sol = solution.clone();
    sol.poses[view] = Some(pose);
    for (k, i) in corr.iter().enumerate() {
        if !inl[k] {
            sol.inliers[*i] = false;
        }
    }
    triangulate_new(&mut sol, index, options);
    Ok(sol)
}

/// Flags measurements whose reprojection error exceeds the threshold and
/// forgets points left with fewer than two inlier views.
fn reclassify(sol: &mut PinholeSolution, index: &Index, threshold: f64) {
    for i in 0..sol.measurements.len() {
        if let Some(e) = sol.reprojection_error(i) {
            sol.inliers[i] = e <= threshold;
        }
    }
    for p in 0..sol.points.len() {
        if sol.points[p].is_none() {
            continue;
        }
        let good = index.by_point[p]
            .clone()
            .filter(|i| sol.inliers[*i] && sol.pose(sol.measurements[*i].view).is_some())
            .count();
        if good < 2 {
            sol.points[p] = None;
        }
    }
}

fn ba_stage(
    sol: &PinholeSolution,
    fixed_view: usize,
    max_iter: usize,
    options: &SfmOptions,
) -> Result<PinholeSolution, SfmError> {
    pinhole_ba(
        sol,
        &PinholeBaOptions {
            solver: SolverOptions {
                max_iter,
                robust_scale: options.huber_px,
                ..Default::default()
            },
            fixed_view,
            depth_anchor: None,
            optimize_intrinsics: true,
        },
    )
}

/// Full incremental reconstruction from pinhole measurements.
///
/// The result is expressed in the frame of the lowest-index registered view
/// and has arbitrary scale.
pub fn reconstruct(
    measurements: &[PinholeMeasurement],
    num_views: usize,
    num_points: usize,
    options: &SfmOptions,
) -> Result<PinholeSolution, SfmError> {
    let mut meas = measurements.to_vec();
    meas.sort_by_key(|m| (m.point, m.view));
    if meas.iter().any(|m| m.view >= num_views || m.point >= num_points) {
        return Err(SfmError::InvalidInput(
            "measurement references unknown view or point".into(),
        ));
    }
    let index = Index::new(&meas, num_views, num_points);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);

    let mut shared = vec![0usize; num_views * num_views];
    for r in &index.by_point {
        let views: Vec<usize> = meas[r.clone()].iter().map(|m| m.view).collect();
        for x in 0..views.len() {
            for y in x + 1..views.len() {
                shared[views[x] * num_views + views[y]] += 1;
            }
        }
    }
    let mut pairs: Vec<(usize, usize, usize)> = (0..num_views)
        .flat_map(|a| (a + 1..num_views).map(move |b| (a, b)))
        .map(|(a, b)| (shared[a * num_views + b], a, b))
        .filter(|(s, _, _)| *s >= 8)
        .collect();
    pairs.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    pairs.truncate(options.pair_candidates.max(1));
    if pairs.is_empty() {
        return Err(SfmError::NoInitialPair);
    }
    let view_meas = |v: usize| -> Vec<(usize, Vector2<f64>)> {
        index.by_view[v].iter().map(|i| (meas[*i].point, meas[*i].xy)).collect()
    };
    let principal = Vector2::new(options.sensor.0 / 2.0, options.sensor.1 / 2.0);
    let heuristic = 1.2 * options.sensor.0.max(options.sensor.1);

    let f0 = match options.f_px_guess {
        Some(f) => f,
        None => {
            // Coarse focal sweep on the best pair: keep the focal length whose
            // essential-matrix fit explains the most correspondences.
            let (_, a, b) = pairs[0];
            let mut best = (0usize, heuristic);
            for k in [1.0, 1.25, 0.8, 1.5, 0.65, 2.0, 2.5] {
                let cam = PinholeCamera {
                    f: heuristic * k,
                    c: principal,
                };
                let mut r = rng.clone();
                if let Ok(tv) = two_view_bootstrap(&view_meas(a), &view_meas(b), &cam, &options.essential, &mut r) {
                    if tv.num_inliers > best.0 {
                        best = (tv.num_inliers, cam.f);
                    }
                }
            }
            debug!("focal sweep picked {:.1} px ({} inliers)", best.1, best.0);
            best.1
        }
    };
    let cam = PinholeCamera { f: f0, c: principal };

    let mut chosen: Option<(f64, usize, usize, TwoViewResult)> = None;
    let mut last_err = SfmError::NoInitialPair;
    for &(s, a, b) in &pairs {
        match two_view_bootstrap(&view_meas(a), &view_meas(b), &cam, &options.essential, &mut rng) {
            Ok(tv) => {
                let score = s as f64 * tv.median_angle;
                if chosen.as_ref().is_none_or(|c| score > c.0) {
                    chosen = Some((score, a, b, tv));
                }
            }
            Err(e) => last_err = e,
        }
    }
    let Some((_, va, vb, tv)) = chosen else {
        return Err(last_err);
    };
    debug!("bootstrap pair ({va}, {vb}) with {} points", tv.points.len());

    let mut sol = PinholeSolution {
        f_px: f0,
        c_x: principal.x,
        c_y: principal.y,
        poses: vec![None; num_views],
        points: vec![None; num_points],
        inliers: vec![true; meas.len()],
        measurements: meas,
        report: None,
    };
    sol.poses[va] = Some(Pose::identity());
    sol.poses[vb] = Some(tv.pose_b);
    for (p, x) in &tv.points {
        sol.points[*p] = Some(*x);
    }
    sol = ba_stage(&sol, va, 20, options)?;
    triangulate_new(&mut sol, &index, options);

    let mut failed: BTreeSet<usize> = BTreeSet::new();
    let mut last_ba = 2;
    loop {
        let next = (0..num_views)
            .filter(|v| sol.poses[*v].is_none() && !failed.contains(v))
            .map(|v| {
                let c = index.by_view[v]
                    .iter()
                    .filter(|i| sol.inliers[**i] && sol.point(sol.measurements[**i].point).is_some())
                    .count();
                (c, v)
            })
            .filter(|(c, _)| *c >= 4)
            .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
        let Some((_, view)) = next else { break };
        match register_indexed(&sol, &index, view, options, &mut rng) {
            Ok(s) => {
                sol = s;
                failed.clear();
            }
            Err(e) => {
                debug!("{e}");
                failed.insert(view);
                continue;
            }
        }
        let n = sol.num_registered();
        if n as f64 >= 1.3 * last_ba as f64 {
            sol = ba_stage(&sol, va, 15, options)?;
            let errs: Vec<f64> = (0..sol.measurements.len())
                .filter(|i| sol.inliers[*i])
                .filter_map(|i| sol.reprojection_error(i))
                .collect();
            let thr = options.outlier_px.max(4.0 * median(errs));
            reclassify(&mut sol, &index, thr);
            triangulate_new(&mut sol, &index, options);
            last_ba = n;
        }
    }
    for v in &failed {
        warn!("view {v} could not be registered");
    }

    sol = ba_stage(&sol, va, 100, options)?;
    reclassify(&mut sol, &index, options.outlier_px);
    triangulate_new(&mut sol, &index, options);
    sol = ba_stage(&sol, va, 100, options)?;
    reclassify(&mut sol, &index, options.outlier_px);
    let first = sol
        .poses
        .iter()
        .position(|p| p.is_some())
        .expect("bootstrap pair registered");
    Ok(sol.rebase(first))
}
