//! Accuracy measures: parameter deviations, trajectory error after
//! alignment, and robustness sweeps over data size.

mod sweep;
mod tum;

pub use sweep::{robustness_sweep, subsample, SweepCell, SweepGrid, SweepOptions};
pub use tum::{associate, read_tum, write_tum, write_tum_trajectory, TumError};

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::umeyama;
use crate::model::{IntrinsicParam, PlenopticIntrinsics, Pose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("reference value of {0} is zero")]
    ZeroReference(&'static str),
    #[error("trajectories differ in length ({estimated} vs {reference})")]
    LengthMismatch { estimated: usize, reference: usize },
    #[error("trajectory alignment is degenerate")]
    DegenerateAlignment,
    #[error("no runs to aggregate")]
    NoRuns,
}

/// Parameters compared by default: the ones with physically meaningful,
/// nonzero reference values.
pub const CORE_PARAMS: [IntrinsicParam; 5] = [
    IntrinsicParam::FocalLength,
    IntrinsicParam::LensToMla,
    IntrinsicParam::MlaToSensor,
    IntrinsicParam::PrincipalX,
    IntrinsicParam::PrincipalY,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDeviation {
    pub name: String,
    pub estimated: f64,
    pub reference: f64,
    pub absolute: f64,
    /// `|estimated - reference| / |reference|`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub rows: Vec<ParameterDeviation>,
}

impl ParameterReport {
    pub fn get(&self, name: &str) -> Option<&ParameterDeviation> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Table with estimate, reference and deviation in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Parameter | Estimate | Reference | Deviation [%] |\n|---|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} |",
                r.name,
                r.estimated,
                r.reference,
                100.0 * r.relative
            );
        }
        s
    }
}

/// Deviation of `estimated` from `reference` for each of `params`.
pub fn parameter_report(
    estimated: &PlenopticIntrinsics,
    reference: &PlenopticIntrinsics,
    params: &[IntrinsicParam],
) -> Result<ParameterReport, EvalError> {
    let rows = params
        .iter()
        .map(|p| {
            let (e, r) = (estimated.get(*p), reference.get(*p));
            if r == 0.0 {
                return Err(EvalError::ZeroReference(p.name()));
            }
            Ok(ParameterDeviation {
                name: p.name().to_string(),
                estimated: e,
                reference: r,
                absolute: (e - r).abs(),
                relative: (e - r).abs() / r.abs(),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ParameterReport { rows })
}

/// Root mean square of the relative errors of several estimates.
pub fn relative_rmse(estimates: &[f64], reference: f64) -> Result<f64, EvalError> {
    if estimates.is_empty() {
        return Err(EvalError::NoRuns);
    }
    if reference == 0.0 {
        return Err(EvalError::ZeroReference("reference"));
    }
    let ms = estimates
        .iter()
        .map(|e| ((e - reference) / reference).powi(2))
        .sum::<f64>()
        / estimates.len() as f64;
    Ok(ms.sqrt())
}

/// Relative RMSE per parameter over several runs.
pub fn runs_rmse(
    runs: &[PlenopticIntrinsics],
    reference: &PlenopticIntrinsics,
    params: &[IntrinsicParam],
) -> Result<Vec<(String, f64)>, EvalError> {
    params
        .iter()
        .map(|p| {
            let values: Vec<f64> = runs.iter().map(|r| r.get(*p)).collect();
            let r = reference.get(*p);
            if r == 0.0 {
                return Err(EvalError::ZeroReference(p.name()));
            }
            Ok((p.name().to_string(), relative_rmse(&values, r)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    Rigid,
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub mode: AlignMode,
    /// RMSE of aligned camera positions, in the reference's units.
    pub rmse: f64,
    pub errors: Vec<f64>,
    /// Scale applied to the estimate; 1 in rigid mode.
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Aligns estimated camera positions to the reference ones (poses are
/// camera-from-world, associated by index) and reports the residual error.
pub fn trajectory_rmse(estimated: &[Pose], reference: &[Pose], mode: AlignMode) -> Result<TrajectoryReport, EvalError> {
    if estimated.len() != reference.len() {
        return Err(EvalError::LengthMismatch {
            estimated: estimated.len(),
            reference: reference.len(),
        });
    }
    let src: Vec<Vector3<f64>> = estimated.iter().map(Pose::center).collect();
    let dst: Vec<Vector3<f64>> = reference.iter().map(Pose::center).collect();
    let (r, t, s) = umeyama(&src, &dst, mode == AlignMode::Similarity).ok_or(EvalError::DegenerateAlignment)?;
    let errors: Vec<f64> = src.iter().zip(&dst).map(|(a, b)| (s * r * a + t - b).norm()).collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(TrajectoryReport {
        mode,
        rmse,
        errors,
        scale: s,
        rotation: r,
        translation: t,
    })
}

/// Largest distance between two camera positions.
pub fn trajectory_extent(poses: &[Pose]) -> f64 {
    let c: Vec<Vector3<f64>> = poses.iter().map(Pose::center).collect();
    let mut d: f64 = 0.0;
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            d = d.max((c[i] - c[j]).norm());
        }
    }
    d
}
