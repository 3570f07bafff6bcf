//! Pinhole reconstruction state and its bundle adjustment.

use nalgebra::{SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{PinholeMeasurement, SfmError};
use crate::ba::engine::{self, BundleModel, Mask, Params, SolveReport, SolverOptions, Term};
use crate::ba::INVALID_RESIDUAL;
use crate::model::{skew, Pose};

/// Pinhole camera, poses and points at arbitrary (or metric) scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinholeSolution {
    pub f_px: f64,
    pub c_x: f64,
    pub c_y: f64,
    /// Camera-from-world, `None` for unregistered views.
    pub poses: Vec<Option<Pose>>,
    pub points: Vec<Option<Vector3<f64>>>,
    /// Sorted by `(point, view)`.
    pub measurements: Vec<PinholeMeasurement>,
    /// Inlier flag per measurement.
    pub inliers: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<SolveReport>,
}

impl PinholeSolution {
    pub fn point(&self, i: usize) -> Option<Vector3<f64>> {
        self.points.get(i).copied().flatten()
    }

    pub fn pose(&self, view: usize) -> Option<Pose> {
        self.poses.get(view).copied().flatten()
    }

    pub fn num_registered(&self) -> usize {
        self.poses.iter().filter(|p| p.is_some()).count()
    }

    pub fn num_triangulated(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }

    /// Same reconstruction with all lengths multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for p in out.poses.iter_mut().flatten() {
            p.translation *= s;
        }
        for x in out.points.iter_mut().flatten() {
            *x *= s;
        }
        out
    }

    /// Re-expresses the world frame so that `view` has the identity pose.
    pub fn rebase(&self, view: usize) -> Self {
        let Some(t0) = self.pose(view) else {
            return self.clone();
        };
        let inv = t0.inverse();
        let mut out = self.clone();
        for p in out.poses.iter_mut().flatten() {
            *p = p.compose(&inv);
        }
        for x in out.points.iter_mut().flatten() {
            *x = t0.transform(x);
        }
        out
    }

    pub fn project(&self, pose: &Pose, x_w: &Vector3<f64>) -> Option<Vector2<f64>> {
        let xc = pose.transform(x_w);
        if xc.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.f_px * xc.x / xc.z + self.c_x,
            self.f_px * xc.y / xc.z + self.c_y,
        ))
    }

    /// Reprojection error of measurement `i`, `None` if it cannot be evaluated.
    pub fn reprojection_error(&self, i: usize) -> Option<f64> {
        let m = &self.measurements[i];
        let pose = self.pose(m.view)?;
        let x = self.point(m.point)?;
        self.project(&pose, &x).map(|p| (p - m.xy).norm())
    }

    /// Mean reprojection error over usable inlier measurements.
    pub fn mean_reprojection_error(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..self.measurements.len() {
            if self.inliers[i] {
                if let Some(e) = self.reprojection_error(i) {
                    s += e;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Depth of measurement `i`'s point in its view.
    pub fn depth(&self, i: usize) -> Option<f64> {
        let m = &self.measurements[i];
        Some(self.pose(m.view)?.transform(&self.point(m.point)?).z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeBaOptions {
    pub solver: SolverOptions,
    /// View whose pose is held constant.
    pub fixed_view: usize,
    /// Point whose coordinate along the fixed view's optical axis is held
    /// constant to fix the scale; `None` picks the most observed point.
    pub depth_anchor: Option<usize>,
    pub optimize_intrinsics: bool,
}

impl Default for PinholeBaOptions {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            fixed_view: 0,
            depth_anchor: None,
            optimize_intrinsics: true,
        }
    }
}

struct PinholeModel<'a> {
    meas: &'a [PinholeMeasurement],
    /// Ranges into `meas` per compact point index.
    point_ranges: Vec<std::ops::Range<usize>>,
    cam_of_view: Vec<usize>,
}

impl BundleModel<3> for PinholeModel<'_> {
    fn num_points(&self) -> usize {
        self.point_ranges.len()
    }

    fn point_terms(&self, params: &Params<3>, point: usize, with_jacobian: bool, out: &mut Vec<Term<3>>) {
        let (f, cx, cy) = (params.global[0], params.global[1], params.global[2]);
        let x_w = params.points[point];
        for m in &self.meas[self.point_ranges[point].clone()] {
            let cam = self.cam_of_view[m.view];
            let pose = &params.cams[cam];
            let rx = pose.rotation * x_w;
            let xc = rx + pose.translation;
            let mut t = Term {
                cam,
                r: Vector2::new(INVALID_RESIDUAL, 0.0),
                jg: SMatrix::zeros(),
                jc: SMatrix::zeros(),
                jp: SMatrix::zeros(),
                valid: false,
            };
            if xc.z > 1e-9 * xc.norm() {
                let (u, v) = (xc.x / xc.z, xc.y / xc.z);
                t.r = Vector2::new(f * u + cx, f * v + cy) - m.xy;
                t.valid = true;
                if with_jacobian {
                    t.jg = SMatrix::<f64, 2, 3>::new(u, 1.0, 0.0, v, 0.0, 1.0);
                    let iz = f / xc.z;
                    let jx = SMatrix::<f64, 2, 3>::new(iz, 0.0, -iz * u, 0.0, iz, -iz * v);
                    t.jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jx * skew(&rx)));
                    t.jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&jx);
                    t.jp = jx * pose.rotation_matrix();
                }
            }
            out.push(t);
        }
    }
}

/// Bundle adjustment of focal length, principal point, poses and points over
/// inlier measurements, with Huber loss.
///
/// Gauge: the pose of `fixed_view` and the anchor point's coordinate along
/// that view's optical axis are held constant. A zero iteration budget
/// returns the input unchanged.
pub fn pinhole_ba(solution: &PinholeSolution, options: &PinholeBaOptions) -> Result<PinholeSolution, SfmError> {
    let mut cam_of_view = vec![usize::MAX; solution.poses.len()];
    let mut view_of_cam = Vec::new();
    for (v, p) in solution.poses.iter().enumerate() {
        if p.is_some() {
            cam_of_view[v] = view_of_cam.len();
            view_of_cam.push(v);
        }
    }
    if cam_of_view.get(options.fixed_view).is_none_or(|c| *c == usize::MAX) {
        return Err(SfmError::InvalidInput(format!(
            "fixed view {} is not registered",
            options.fixed_view
        )));
    }
    let used: Vec<PinholeMeasurement> = solution
        .measurements
        .iter()
        .zip(&solution.inliers)
        .filter(|(m, inl)| **inl && solution.pose(m.view).is_some() && solution.point(m.point).is_some())
        .map(|(m, _)| *m)
        .collect();
    let mut point_ranges = Vec::new();
    let mut point_ids = Vec::new();
    let mut start = 0;
    for i in 1..=used.len() {
        if i == used.len() || used[i].point != used[start].point {
            point_ranges.push(start..i);
            point_ids.push(used[start].point);
            start = i;
        }
    }
    if options.solver.max_iter == 0 || used.is_empty() {
        return Ok(solution.clone());
    }
    let fixed_pose = solution.pose(options.fixed_view).expect("checked");
    let params = Params {
        global: SVector::<f64, 3>::new(solution.f_px, solution.c_x, solution.c_y),
        cams: view_of_cam
            .iter()
            .map(|v| solution.poses[*v].expect("registered"))
            .collect(),
        points: point_ids
            .iter()
            .map(|p| solution.points[*p].expect("triangulated"))
            .collect(),
    };
    let mut mask = Mask::none(view_of_cam.len());
    mask.global = [!options.optimize_intrinsics; 3];
    mask.cams[cam_of_view[options.fixed_view]] = true;
    let anchor = match options.depth_anchor {
        Some(p) => point_ids.iter().position(|q| *q == p),
        None => (0..point_ranges.len()).max_by_key(|i| (point_ranges[*i].len(), usize::MAX - i)),
    };
    // Holding a world coordinate fixed only fixes scale along the fixed
    // view's axis when that view is at the identity; rotate into its frame.
    let rebased = !(fixed_pose.rotation.angle() == 0.0 && fixed_pose.translation == Vector3::zeros());
    let (params, frame) = if rebased {
        let inv = fixed_pose.inverse();
        (
            Params {
                global: params.global,
                cams: params.cams.iter().map(|p| p.compose(&inv)).collect(),
                points: params.points.iter().map(|x| fixed_pose.transform(x)).collect(),
            },
            Some(fixed_pose),
        )
    } else {
        (params, None)
    };
    if let Some(a) = anchor {
        mask.point_coords.push((a, 2));
    }
    let model = PinholeModel {
        meas: &used,
        point_ranges,
        cam_of_view: cam_of_view.clone(),
    };
    let (out, report) = engine::solve(&model, params, &mask, &options.solver)?;
    let mut sol = solution.clone();
    sol.f_px = out.global[0];
    sol.c_x = out.global[1];
    sol.c_y = out.global[2];
    for (c, v) in view_of_cam.iter().enumerate() {
        let mut p = out.cams[c];
        if let Some(t0) = frame {
            p = p.compose(&t0);
        }
        sol.poses[*v] = Some(p);
    }
    for (i, pid) in point_ids.iter().enumerate() {
        let mut x = out.points[i];
        if let Some(t0) = frame {
            x = t0.inverse().transform(&x);
        }
        sol.points[*pid] = Some(x);
    }
    sol.report = Some(report);
    Ok(sol)
}
