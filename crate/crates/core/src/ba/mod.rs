//! Plenoptic bundle adjustment: joint refinement of intrinsics, poses and
//! points over micro-image reprojection residuals.

pub mod engine;

use nalgebra::{RowVector3, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{
    huber, BundleModel, IterationRecord, Mask, PairTerm, Params, SolveError, SolveReport, SolverOptions, Term,
    Termination,
};

use crate::model::{
    project_micro, project_micro_with_jacobian, IntrinsicParam, MicroLensGrid, ModelError, PlenopticIntrinsics, Pose,
    NUM_INTRINSIC_PARAMS,
};
use crate::observations::{Observation, ObservationSet};
use crate::plenoptic_init::ScaleConstraint;

/// Residual assigned to observations the current iterate cannot project.
pub const INVALID_RESIDUAL: f64 = 1e3;

const G: usize = NUM_INTRINSIC_PARAMS;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("observation of point {point} in view {view} cannot be projected: {source}")]
    InvalidGeometry {
        point: usize,
        view: usize,
        source: ModelError,
    },
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Everything the plenoptic bundle adjustment optimizes over, plus the data.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProblem {
    pub intrinsics: PlenopticIntrinsics,
    pub grid: MicroLensGrid,
    pub poses: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
    pub observations: ObservationSet,
    pub scale_constraints: Vec<ScaleConstraint>,
    pub fixed_intrinsics: Vec<IntrinsicParam>,
    /// Always contains view 0.
    pub fixed_poses: Vec<usize>,
}

impl CalibrationProblem {
    pub fn new(
        intrinsics: PlenopticIntrinsics,
        grid: MicroLensGrid,
        poses: Vec<Pose>,
        points: Vec<Vector3<f64>>,
        observations: ObservationSet,
        scale_constraints: Vec<ScaleConstraint>,
        fixed_intrinsics: Vec<IntrinsicParam>,
    ) -> Self {
        Self {
            intrinsics,
            grid,
            poses,
            points,
            observations,
            scale_constraints,
            fixed_intrinsics,
            fixed_poses: vec![0],
        }
    }

    pub fn validate(&self) -> Result<(), BaError> {
        let bad = |m: String| Err(BaError::InvalidProblem(m));
        if self.poses.is_empty() {
            return bad("no poses".into());
        }
        if !self.fixed_poses.contains(&0) {
            return bad("pose 0 must be fixed".into());
        }
        if self.observations.num_views() > self.poses.len() {
            return bad(format!(
                "observations reference view {} but only {} poses exist",
                self.observations.num_views() - 1,
                self.poses.len()
            ));
        }
        if self.observations.num_points() > self.points.len() {
            return bad(format!(
                "observations reference point {} but only {} points exist",
                self.observations.num_points() - 1,
                self.points.len()
            ));
        }
        if let Some(o) = self.observations.records().iter().find(|o| o.lens >= self.grid.len()) {
            return bad(format!("unknown lens {}", o.lens));
        }
        for c in &self.scale_constraints {
            if c.point_a == c.point_b || c.point_a >= self.points.len() || c.point_b >= self.points.len() {
                return bad(format!("scale constraint {}-{} is invalid", c.point_a, c.point_b));
            }
            if !(c.distance > 0.0) {
                return bad(format!(
                    "scale constraint {}-{} has non-positive distance",
                    c.point_a, c.point_b
                ));
            }
        }
        Ok(())
    }

    pub fn is_fixed(&self, p: IntrinsicParam) -> bool {
        self.fixed_intrinsics.contains(&p)
    }

    fn params(&self) -> Params<G> {
        Params {
            global: SVector::from(self.intrinsics.to_array()),
            cams: self.poses.clone(),
            points: self.points.clone(),
        }
    }

    fn with_params(&self, p: Params<G>) -> Self {
        let mut out = self.clone();
        let arr: [f64; G] = p.global.into();
        out.intrinsics = self.intrinsics.with_array(&arr);
        out.poses = p.cams;
        out.points = p.points;
        out
    }

    fn mask(&self) -> Mask<G> {
        let mut mask = Mask::none(self.poses.len());
        for p in &self.fixed_intrinsics {
            mask.global[p.index()] = true;
        }
        for &v in &self.fixed_poses {
            if v < mask.cams.len() {
                mask.cams[v] = true;
            }
        }
        for v in 0..self.poses.len() {
            if self.observations.view_tracks(v).is_empty() {
                mask.cams[v] = true;
            }
        }
        let constrained: Vec<usize> = self
            .scale_constraints
            .iter()
            .flat_map(|c| [c.point_a, c.point_b])
            .collect();
        for p in 0..self.points.len() {
            if self.observations.point_tracks(p).is_empty() && !constrained.contains(&p) {
                mask.point_coords.extend([(p, 0), (p, 1), (p, 2)]);
            }
        }
        mask
    }
}

struct PlenopticModel<'a> {
    problem: &'a CalibrationProblem,
    robust_scale: f64,
}

impl PlenopticModel<'_> {
    fn term(&self, params: &Params<G>, intr: &PlenopticIntrinsics, o: &Observation, with_jacobian: bool) -> Term<G> {
        let pose = &params.cams[o.view];
        let x_w = &params.points[o.point];
        let center = &self.problem.grid.centers[o.lens];
        let rx = pose.rotation * x_w;
        let x_c = rx + pose.translation;
        let mut t = Term {
            cam: o.view,
            r: Vector2::new(INVALID_RESIDUAL, 0.0),
            jg: Default::default(),
            jc: Default::default(),
            jp: Default::default(),
            valid: false,
        };
        if with_jacobian {
            if let Ok((x, j)) = project_micro_with_jacobian(intr, center, &x_c) {
                t.r = x - o.xy;
                t.jg = j.intrinsics;
                t.jc.fixed_view_mut::<2, 3>(0, 0)
                    .copy_from(&(-j.point * crate::model::skew(&rx)));
                t.jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&j.point);
                t.jp = j.point * pose.rotation_matrix();
                t.valid = true;
            }
        } else if let Ok(x) = project_micro(intr, center, &x_c) {
            t.r = x - o.xy;
            t.valid = true;
        }
        t
    }
}

impl BundleModel<G> for PlenopticModel<'_> {
    fn num_points(&self) -> usize {
        self.problem.points.len()
    }

    fn point_terms(&self, params: &Params<G>, point: usize, with_jacobian: bool, out: &mut Vec<Term<G>>) {
        let arr: [f64; G] = params.global.into();
        let intr = self.problem.intrinsics.with_array(&arr);
        let obs = self.problem.observations.records();
        for o in &obs[self.problem.observations.point_records(point)] {
            out.push(self.term(params, &intr, o, with_jacobian));
        }
    }

    fn pair_terms(&self, params: &Params<G>) -> Vec<PairTerm> {
        let scale = if self.robust_scale.is_finite() {
            self.robust_scale
        } else {
            1.0
        };
        self.problem
            .scale_constraints
            .iter()
            .map(|c| {
                let w = c.weight / scale;
                let d = params.points[c.point_a] - params.points[c.point_b];
                let n = d.norm();
                let u: RowVector3<f64> = if n > 0.0 {
                    (d / n).transpose()
                } else {
                    RowVector3::zeros()
                };
                PairTerm {
                    a: c.point_a,
                    b: c.point_b,
                    r: w * (n - c.distance),
                    ja: u * w,
                    jb: -u * w,
                }
            })
            .collect()
    }
}

/// Residual of one observation (model minus measurement) at the problem's
/// current parameters.
pub fn residual(problem: &CalibrationProblem, obs: &Observation) -> Result<Vector2<f64>, BaError> {
    let pose = problem
        .poses
        .get(obs.view)
        .ok_or_else(|| BaError::InvalidProblem(format!("unknown view {}", obs.view)))?;
    let x_w = problem
        .points
        .get(obs.point)
        .ok_or_else(|| BaError::InvalidProblem(format!("unknown point {}", obs.point)))?;
    let center = problem
        .grid
        .centers
        .get(obs.lens)
        .ok_or_else(|| BaError::InvalidProblem(format!("unknown lens {}", obs.lens)))?;
    project_micro(&problem.intrinsics, center, &pose.transform(x_w))
        .map(|x| x - obs.xy)
        .map_err(|source| BaError::InvalidGeometry {
            point: obs.point,
            view: obs.view,
            source,
        })
}

/// Total robust cost with residual statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub cost: f64,
    pub mean_abs_residual: f64,
    pub median_abs_residual: f64,
    pub num_residuals: usize,
    pub invalid_residuals: usize,
}

/// Evaluates the cost minimized by [`solve`] without changing the problem.
pub fn evaluate_cost(problem: &CalibrationProblem, robust_scale: f64) -> CostSummary {
    let model = PlenopticModel { problem, robust_scale };
    let (cost, mut norms, invalid) = engine::cost_and_residuals(&model, &problem.params(), robust_scale, true);
    let mean = if norms.is_empty() {
        0.0
    } else {
        norms.iter().sum::<f64>() / norms.len() as f64
    };
    CostSummary {
        cost,
        mean_abs_residual: mean,
        median_abs_residual: engine::median_in_place(&mut norms),
        num_residuals: norms.len(),
        invalid_residuals: invalid,
    }
}

/// Runs Levenberg-Marquardt on the problem.
pub fn solve(
    problem: &CalibrationProblem,
    options: &SolverOptions,
) -> Result<(CalibrationProblem, SolveReport), BaError> {
    problem.validate()?;
    let model = PlenopticModel {
        problem,
        robust_scale: options.robust_scale,
    };
    let (params, report) = engine::solve(&model, problem.params(), &problem.mask(), options)?;
    Ok((problem.with_params(params), report))
}

/// One LM step computed by Schur elimination and by dense normal equations,
/// in the layout `[intrinsics | poses (omega, dt) | points]`.
pub fn compare_steps(problem: &CalibrationProblem, robust_scale: f64, lambda: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let model = PlenopticModel { problem, robust_scale };
    let params = problem.params();
    let mask = problem.mask();
    let lin = engine::linearize(&model, &params, &mask, robust_scale);
    let schur = engine::schur_step(&lin, params.points.len(), lambda)?;
    let dense = engine::dense_step(&model, &params, &mask, robust_scale, lambda)?;
    Some((schur.iter().copied().collect(), dense.iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::default_dataset;

    fn small_problem(sigma: f64) -> CalibrationProblem {
        let ds = default_dataset(40, 6, sigma, 0.0, 3).unwrap();
        CalibrationProblem::new(
            ds.intrinsics_gt,
            ds.grid.clone(),
            ds.poses_gt.clone(),
            ds.points_gt.clone(),
            ds.observations.clone(),
            ds.scale_constraints.clone(),
            Vec::new(),
        )
    }

    #[test]
    fn ground_truth_residuals_vanish() {
        let p = small_problem(0.0);
        for o in p.observations.records() {
            assert_eq!(residual(&p, o).unwrap(), Vector2::zeros());
        }
        let c = evaluate_cost(&p, 1.0);
        assert_eq!(c.cost, 0.0);
        assert_eq!(c.invalid_residuals, 0);
    }

    #[test]
    fn residual_is_linear_in_measurement() {
        let p = small_problem(0.0);
        let mut o = p.observations.records()[5];
        o.xy.x += 0.3;
        let r = residual(&p, &o).unwrap();
        assert!((r.x + 0.3).abs() < 1e-12);
        assert_eq!(r.y, 0.0);
    }

    #[test]
    fn schur_matches_dense_step() {
        let mut p = small_problem(0.3);
        p.intrinsics.f_l *= 1.002;
        p.intrinsics.c_x += 1.0;
        for x in p.points.iter_mut() {
            x.x += 0.5;
        }
        for lambda in [1e-4, 1e-1] {
            let (s, d) = compare_steps(&p, 1.0, lambda).unwrap();
            let num: f64 = s.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = d.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den < 1e-8, "relative difference {}", num / den);
        }
    }

    #[test]
    fn pose_zero_must_be_fixed() {
        let mut p = small_problem(0.0);
        p.fixed_poses.clear();
        assert!(matches!(p.validate(), Err(BaError::InvalidProblem(_))));
    }

    #[test]
    fn zero_iterations_return_input() {
        let p = small_problem(0.2);
        let opts = SolverOptions {
            max_iter: 0,
            ..Default::default()
        };
        let (q, rep) = solve(&p, &opts).unwrap();
        assert_eq!(q, p);
        assert_eq!(rep.termination, Termination::NoIterations);
        let c = evaluate_cost(&p, 1.0).cost;
        assert!((rep.initial_cost - c).abs() < 1e-12 * c);
    }
}
