//! Metric scaling of the pinhole reconstruction and linear initialization of
//! the main-lens-to-MLA distance `b_L0` and the MLA-to-sensor distance `B`.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::CalibrationProblem;
use crate::model::{IntrinsicParam, MicroLensGrid, PlenopticIntrinsics, Pose};
use crate::observations::ObservationSet;
use crate::sfm::PinholeSolution;

/// Known metric distance between two scene points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleConstraint {
    pub point_a: usize,
    pub point_b: usize,
    /// Millimeters.
    pub distance: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl ScaleConstraint {
    pub fn new(point_a: usize, point_b: usize, distance: f64) -> Self {
        Self {
            point_a,
            point_b,
            distance,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InitError {
    #[error("no scale constraints given")]
    NoConstraints,
    #[error("invalid scale constraint between {a} and {b}: {reason}")]
    InvalidConstraint { a: usize, b: usize, reason: String },
    #[error("points {a} and {b} coincide in the reconstruction (distance {distance:e})")]
    ZeroBaseline { a: usize, b: usize, distance: f64 },
    #[error("point {0} has no reconstructed position")]
    MissingPoint(usize),
    #[error("virtual depth samples span rank 1 ({samples} usable samples)")]
    RankDeficient { samples: usize },
    #[error("least squares gave non-positive B = {b} or b_L0 = {b_l0}")]
    NegativeParameter { b: f64, b_l0: f64 },
}

/// Outcome of [`apply_metric_scale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub scale: f64,
    /// `scaled distance - target distance` per constraint, millimeters.
    pub residuals: Vec<f64>,
}

/// Scales translations and points so the constraint distances are met in
/// the weighted geometric-mean sense.
pub fn apply_metric_scale(
    solution: &PinholeSolution,
    constraints: &[ScaleConstraint],
) -> Result<(PinholeSolution, ScaleReport), InitError> {
    if constraints.is_empty() {
        return Err(InitError::NoConstraints);
    }
    let mut current = Vec::with_capacity(constraints.len());
    let mut log_sum = 0.0;
    let mut w_sum = 0.0;
    for c in constraints {
        if !(c.distance > 0.0) || !(c.weight > 0.0) {
            return Err(InitError::InvalidConstraint {
                a: c.point_a,
                b: c.point_b,
                reason: "distance and weight must be positive".into(),
            });
        }
        let pa = solution.point(c.point_a).ok_or(InitError::MissingPoint(c.point_a))?;
        let pb = solution.point(c.point_b).ok_or(InitError::MissingPoint(c.point_b))?;
        let d = (pa - pb).norm();
        if d < 1e-9 {
            return Err(InitError::ZeroBaseline {
                a: c.point_a,
                b: c.point_b,
                distance: d,
            });
        }
        current.push(d);
        log_sum += c.weight * (c.distance / d).ln();
        w_sum += c.weight;
    }
    let scale = (log_sum / w_sum).exp();
    let scaled = solution.scaled(scale);
    let residuals = constraints
        .iter()
        .zip(&current)
        .map(|(c, d)| d * scale - c.distance)
        .collect();
    Ok((scaled, ScaleReport { scale, residuals }))
}

/// One `(point, view)` sample for the `(B, b_L0)` fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthSample {
    /// Virtual depth from micro-image disparity.
    pub v: f64,
    /// Metric depth of the point in front of the main lens, millimeters.
    pub z_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    /// Samples with virtual depth outside `(v_min, v_max)` are ignored.
    pub v_min: f64,
    pub v_max: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            v_min: 1.5,
            v_max: 20.0,
        }
    }
}

/// Least-squares `(B, b_L0)` from samples `b_L = v·B + b_L0`.
///
/// Returns `(B, b_L0)` in millimeters.
pub fn fit_b_bl0(samples: &[(f64, f64)]) -> Result<(f64, f64), InitError> {
    let n = samples.len();
    if n < 2 {
        return Err(InitError::RankDeficient { samples: n });
    }
    let (v_min, v_max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| {
            (lo.min(*v), hi.max(*v))
        });
    if v_max - v_min <= 1e-9 {
        return Err(InitError::RankDeficient { samples: n });
    }
    // Normal equations of V [B, b_L0]^T = b_L, solved on centered
    // abscissae to keep the 2x2 system well conditioned.
    let nf = n as f64;
    let v_bar = samples.iter().map(|s| s.0).sum::<f64>() / nf;
    let b_bar = samples.iter().map(|s| s.1).sum::<f64>() / nf;
    let mut m = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for (v, b) in samples {
        let row = Vector2::new(v - v_bar, 1.0);
        m += row * row.transpose();
        rhs += row * (b - b_bar);
    }
    let sol = m.try_inverse().ok_or(InitError::RankDeficient { samples: n })? * rhs;
    let big_b = sol[0];
    let b_l0 = b_bar + sol[1] - big_b * v_bar;
    if !(big_b > 0.0) || !(b_l0 > 0.0) {
        return Err(InitError::NegativeParameter { b: big_b, b_l0 });
    }
    Ok((big_b, b_l0))
}

/// Initializes `(B, b_L0)` from metric depths and virtual depths, with main
/// lens image distances from the thin lens equation.
pub fn init_b_bl0(samples: &[DepthSample], f_l: f64, options: &InitOptions) -> Result<(f64, f64), InitError> {
    let pairs: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.z_c > f_l && s.v > options.v_min && s.v < options.v_max)
        .map(|s| (s.v, 1.0 / (1.0 / f_l - 1.0 / s.z_c)))
        .collect();
    fit_b_bl0(&pairs)
}

/// Which intrinsics the plenoptic bundle adjustment keeps constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CalibrationMode {
    #[default]
    Full,
    /// Focal length and MLA-to-sensor distance known from a prior calibration.
    Recalibration { f_l: f64, mla_sensor: f64 },
}

impl CalibrationMode {
    pub fn fixed_params(&self) -> Vec<IntrinsicParam> {
        match self {
            Self::Full => Vec::new(),
            Self::Recalibration { .. } => vec![IntrinsicParam::FocalLength, IntrinsicParam::MlaToSensor],
        }
    }
}

/// Starting values for the plenoptic bundle adjustment.
///
/// Distortion is zeroed, `f_L = f_px·s_x`, and the principal point comes from
/// the pinhole model. Points and views missing from the pinhole solution are
/// kept as placeholders without observations.
#[allow(clippy::too_many_arguments)]
pub fn seed_plenoptic_problem(
    solution: &PinholeSolution,
    mla_sensor: f64,
    b_l0: f64,
    pixel_size: (f64, f64),
    grid: &MicroLensGrid,
    observations: &ObservationSet,
    scale_constraints: &[ScaleConstraint],
    mode: &CalibrationMode,
    extra_fixed: &[IntrinsicParam],
) -> CalibrationProblem {
    let mut intr = PlenopticIntrinsics {
        f_l: solution.f_px * pixel_size.0,
        b_l0,
        mla_sensor,
        c_x: solution.c_x,
        c_y: solution.c_y,
        s_x: pixel_size.0,
        s_y: pixel_size.1,
        distortion: Default::default(),
    };
    if let CalibrationMode::Recalibration { f_l, mla_sensor } = mode {
        intr.f_l = *f_l;
        intr.mla_sensor = *mla_sensor;
    }
    let poses: Vec<Pose> = solution
        .poses
        .iter()
        .map(|p| p.unwrap_or_else(Pose::identity))
        .collect();
    let points: Vec<Vector3<f64>> = solution
        .points
        .iter()
        .map(|p| p.unwrap_or_else(Vector3::zeros))
        .collect();
    let obs = observations.retain(|o| {
        solution.poses.get(o.view).is_some_and(|p| p.is_some())
            && solution.points.get(o.point).is_some_and(|p| p.is_some())
    });
    let constraints = scale_constraints
        .iter()
        .filter(|c| solution.point(c.point_a).is_some() && solution.point(c.point_b).is_some())
        .copied()
        .collect();
    let mut fixed = mode.fixed_params();
    for p in extra_fixed {
        if !fixed.contains(p) {
            fixed.push(*p);
        }
    }
    CalibrationProblem::new(intr, grid.clone(), poses, points, obs, constraints, fixed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forward(v: f64) -> (f64, f64) {
        (v, 0.376 * v + 15.893)
    }

    #[test]
    fn two_exact_samples() {
        let (b, b0) = fit_b_bl0(&[(2.0, 16.645), (4.0, 17.397)]).unwrap();
        assert!((b - 0.376).abs() < 1e-12);
        assert!((b0 - 15.893).abs() < 1e-12);
    }

    #[test]
    fn equal_depths_are_rank_deficient() {
        let s = vec![forward(3.0); 10];
        assert!(matches!(fit_b_bl0(&s), Err(InitError::RankDeficient { .. })));
        assert!(matches!(
            fit_b_bl0(&[forward(3.0)]),
            Err(InitError::RankDeficient { .. })
        ));
    }

    #[test]
    fn negative_solution_is_reported() {
        let r = fit_b_bl0(&[(2.0, 17.0), (4.0, 16.0)]);
        assert!(matches!(r, Err(InitError::NegativeParameter { .. })));
    }

    #[test]
    fn thin_lens_samples_are_recovered() {
        let f = 16.748;
        let samples: Vec<DepthSample> = (0..50)
            .map(|i| {
                let z = 600.0 + 30.0 * i as f64;
                let bl = 1.0 / (1.0 / f - 1.0 / z);
                DepthSample {
                    v: (bl - 15.893) / 0.376,
                    z_c: z,
                }
            })
            .collect();
        let (b, b0) = init_b_bl0(&samples, f, &InitOptions::default()).unwrap();
        assert!(((b - 0.376) / 0.376).abs() < 1e-9);
        assert!(((b0 - 15.893) / 15.893).abs() < 1e-9);
    }

    #[test]
    fn samples_outside_range_are_ignored() {
        let f = 16.748;
        let mut samples = vec![DepthSample { v: 50.0, z_c: 900.0 }, DepthSample { v: 3.0, z_c: 10.0 }];
        assert!(init_b_bl0(&samples, f, &InitOptions::default()).is_err());
        for z in [800.0, 1500.0] {
            let bl = 1.0 / (1.0 / f - 1.0 / z);
            samples.push(DepthSample {
                v: (bl - 15.893) / 0.376,
                z_c: z,
            });
        }
        let (b, _) = init_b_bl0(&samples, f, &InitOptions::default()).unwrap();
        assert!((b - 0.376).abs() < 1e-9);
    }

    #[test]
    fn recalibration_fixes_focal_and_mla_distance() {
        let m = CalibrationMode::Recalibration {
            f_l: 16.748,
            mla_sensor: 0.376,
        };
        assert_eq!(
            m.fixed_params(),
            vec![IntrinsicParam::FocalLength, IntrinsicParam::MlaToSensor]
        );
        assert!(CalibrationMode::Full.fixed_params().is_empty());
    }
}
