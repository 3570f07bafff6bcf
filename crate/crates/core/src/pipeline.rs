//! End-to-end calibration: micro-image clusters to pinhole structure from
//! motion, metric scale and plenoptic seeding, then plenoptic bundle
//! adjustment.

use log::{debug, info};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::{self, BaError, CalibrationProblem, SolveReport, SolverOptions};
use crate::model::{IntrinsicParam, MicroLensGrid, PlenopticIntrinsics};
use crate::observations::ObservationSet;
use crate::plenoptic_init::{
    apply_metric_scale, init_b_bl0, seed_plenoptic_problem, CalibrationMode, DepthSample, InitError, InitOptions,
    ScaleConstraint,
};
use crate::sfm::{
    reconstruct, virtual_track_centroids, CentroidOptions, PinholeMeasurement, PinholeSolution, SfmError, SfmOptions,
};
use crate::synthgen::SyntheticDataset;

/// Everything a calibration run consumes besides its options.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationInput {
    pub grid: MicroLensGrid,
    pub observations: ObservationSet,
    pub scale_constraints: Vec<ScaleConstraint>,
    /// Sensor size, pixels.
    pub sensor: (f64, f64),
    /// Pixel pitch, millimeters.
    pub pixel_size: (f64, f64),
    pub nominal_f_l: Option<f64>,
}

impl CalibrationInput {
    /// Input of a synthetic dataset, without a nominal focal length.
    pub fn from_synthetic(ds: &SyntheticDataset) -> Self {
        Self {
            grid: ds.grid.clone(),
            observations: ds.observations.clone(),
            scale_constraints: ds.scale_constraints.clone(),
            sensor: (ds.grid.sensor_width, ds.grid.sensor_height),
            pixel_size: (ds.intrinsics_gt.s_x, ds.intrinsics_gt.s_y),
            nominal_f_l: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub mode: CalibrationMode,
    /// Intrinsics held constant on top of those implied by `mode`.
    pub fixed: Vec<IntrinsicParam>,
    pub centroids: CentroidOptions,
    pub sfm: SfmOptions,
    pub init: InitOptions,
    pub solver: SolverOptions,
    /// After a first plenoptic adjustment, observations with a residual above
    /// this many pixels are dropped and the adjustment is repeated.
    pub reject_px: Option<f64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            mode: CalibrationMode::Full,
            fixed: Vec::new(),
            centroids: CentroidOptions::default(),
            sfm: SfmOptions::default(),
            init: InitOptions::default(),
            solver: SolverOptions::default(),
            reject_px: Some(3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("no usable micro-image clusters")]
    NoMeasurements,
    #[error(transparent)]
    Sfm(#[from] SfmError),
    #[error(transparent)]
    Init(#[from] InitError),
    #[error(transparent)]
    Ba(#[from] BaError),
}

impl PipelineError {
    /// Name of the stage that failed.
    pub fn stage(&self) -> &'static str {
        match self {
            Self::NoMeasurements => "centroids",
            Self::Sfm(_) => "sfm-init",
            Self::Init(_) => "plenoptic-init",
            Self::Ba(_) => "ba",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub clusters: usize,
    pub cluster_failures: usize,
    pub registered_views: usize,
    pub triangulated_points: usize,
    pub pinhole_f_px: f64,
    pub pinhole_reprojection_px: f64,
    pub metric_scale: f64,
    pub depth_samples: usize,
    pub rejected_observations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub problem: CalibrationProblem,
    pub report: SolveReport,
    /// Starting point of the plenoptic adjustment.
    pub initial: PlenopticIntrinsics,
    /// Pinhole reconstruction in millimeters.
    pub pinhole: PinholeSolution,
    pub summary: StageSummary,
}

/// Thin-lens parameters from pinhole depths: with micro lens centers taken
/// equal to micro image centers, `1/z = α + β·v'/F` holds exactly, where
/// `F = b_L0 + B`, `β = B/b_L0` and `α = 1/f_L − 1/b_L0`.
fn fit_inverse_depth(samples: &[(f64, f64)]) -> Result<(f64, f64), InitError> {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return Err(InitError::RankDeficient { samples: samples.len() });
    }
    let mw = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let mut sww = 0.0;
    let mut swy = 0.0;
    for (w, y) in samples {
        sww += (w - mw) * (w - mw);
        swy += (w - mw) * (y - my);
    }
    if sww <= 1e-12 * mw * mw * n {
        return Err(InitError::RankDeficient { samples: samples.len() });
    }
    let beta = swy / sww;
    Ok((my - beta * mw, beta))
}

fn usable_samples(
    sol: &PinholeSolution,
    measurements: &[PinholeMeasurement],
    focal_mm: f64,
    options: &InitOptions,
) -> Vec<(usize, f64, f64)> {
    measurements
        .iter()
        .filter_map(|m| {
            let i = sol
                .measurements
                .binary_search_by(|q| (q.point, q.view).cmp(&(m.point, m.view)))
                .ok()?;
            if !sol.inliers[i] || !(m.v > options.v_min && m.v < options.v_max) {
                return None;
            }
            let z = sol.depth(i)?;
            (z > 0.0).then_some((i, m.v / focal_mm, z))
        })
        .collect()
}

fn median(v: Vec<f64>) -> f64 {
    let mut v = v;
    ba::engine::median_in_place(&mut v)
}

/// Runs the whole calibration.
pub fn calibrate(input: &CalibrationInput, options: &PipelineOptions) -> Result<CalibrationResult, PipelineError> {
    let (sx, sy) = input.pixel_size;
    let center = Vector2::new(input.sensor.0 / 2.0, input.sensor.1 / 2.0);

    // Micro lens centers on the micro image centers turn every cluster into
    // an exact pinhole measurement of a camera centered at the main lens.
    let flat = PlenopticIntrinsics {
        f_l: 1.0,
        b_l0: 1.0,
        mla_sensor: 0.0,
        c_x: center.x,
        c_y: center.y,
        s_x: sx,
        s_y: sy,
        distortion: Default::default(),
    };
    let clusters = virtual_track_centroids(&input.observations, &input.grid, &flat, &options.centroids);
    if clusters.measurements.is_empty() {
        return Err(PipelineError::NoMeasurements);
    }
    debug!(
        "{} clusters, {} failed",
        clusters.measurements.len(),
        clusters.failures.len()
    );

    let mut sfm_opts = options.sfm;
    sfm_opts.sensor = input.sensor;
    if sfm_opts.f_px_guess.is_none() {
        sfm_opts.f_px_guess = input.nominal_f_l.map(|f| f / sx);
    }
    let num_views = input.observations.num_views();
    let num_points = input.observations.num_points();
    let sol = reconstruct(&clusters.measurements, num_views, num_points, &sfm_opts)?;
    info!(
        "pinhole reconstruction: {} views, {} points, f = {:.2} px, {:.3} px mean error",
        sol.num_registered(),
        sol.num_triangulated(),
        sol.f_px,
        sol.mean_reprojection_error()
    );
    let focal_mm = sol.f_px * sx;

    // Metric scale and thin-lens parameters.
    let (metric, scale, f_l, b_l0, b) = match options.mode {
        CalibrationMode::Full => {
            let constraints: Vec<ScaleConstraint> = input
                .scale_constraints
                .iter()
                .filter(|c| sol.point(c.point_a).is_some() && sol.point(c.point_b).is_some())
                .copied()
                .collect();
            let (metric, rep) = apply_metric_scale(&sol, &constraints)?;
            let samples: Vec<(f64, f64)> = usable_samples(&metric, &clusters.measurements, focal_mm, &options.init)
                .into_iter()
                .map(|(_, w, z)| (w, 1.0 / z))
                .collect();
            let (alpha, beta) = fit_inverse_depth(&samples)?;
            let b_l0 = focal_mm / (1.0 + beta);
            let b = focal_mm - b_l0;
            let f_l = 1.0 / (alpha + 1.0 / b_l0);
            if !(b > 0.0 && b_l0 > 0.0 && f_l > 0.0) {
                return Err(InitError::NegativeParameter { b, b_l0 }.into());
            }
            (metric, rep.scale, f_l, b_l0, b)
        }
        CalibrationMode::Recalibration { f_l, mla_sensor } => {
            let b_l0 = focal_mm - mla_sensor;
            if !(b_l0 > 0.0) {
                return Err(InitError::NegativeParameter { b: mla_sensor, b_l0 }.into());
            }
            let alpha = 1.0 / f_l - 1.0 / b_l0;
            let beta = mla_sensor / b_l0;
            let ratios: Vec<f64> = usable_samples(&sol, &clusters.measurements, focal_mm, &options.init)
                .into_iter()
                .filter_map(|(_, w, z)| {
                    let inv = alpha + beta * w;
                    (inv > 0.0).then(|| 1.0 / inv / z)
                })
                .collect();
            if ratios.is_empty() {
                return Err(InitError::NoConstraints.into());
            }
            let scale = median(ratios);
            (sol.scaled(scale), scale, f_l, b_l0, mla_sensor)
        }
    };
    debug!("thin-lens init: f_L = {f_l:.4}, b_L0 = {b_l0:.4}, B = {b:.4}, scale = {scale:.4}");

    // With the estimated lens-center offsets the clusters yield true virtual
    // depths; refine (B, b_L0) from them.
    let guess = PlenopticIntrinsics {
        f_l,
        b_l0,
        mla_sensor: b,
        c_x: metric.c_x,
        c_y: metric.c_y,
        ..flat
    };
    let second = virtual_track_centroids(&input.observations, &input.grid, &guess, &options.centroids);
    let samples: Vec<DepthSample> = second
        .measurements
        .iter()
        .filter_map(|m| {
            let i = metric
                .measurements
                .binary_search_by(|q| (q.point, q.view).cmp(&(m.point, m.view)))
                .ok()?;
            let z_c = metric.depth(i)?;
            metric.inliers[i].then_some(DepthSample { v: m.v, z_c })
        })
        .collect();
    let (b, b_l0) = match options.mode {
        CalibrationMode::Full => init_b_bl0(&samples, f_l, &options.init).unwrap_or((b, b_l0)),
        CalibrationMode::Recalibration { .. } => (b, b_l0),
    };

    let mut problem = seed_plenoptic_problem(
        &metric,
        b,
        b_l0,
        input.pixel_size,
        &input.grid,
        &input.observations,
        &input.scale_constraints,
        &options.mode,
        &options.fixed,
    );
    problem.intrinsics.f_l = f_l;
    problem.intrinsics.mla_sensor = b;
    if let Some(first) = metric.poses.iter().position(|p| p.is_some()) {
        if !problem.fixed_poses.contains(&first) {
            problem.fixed_poses.push(first);
        }
    }
    if matches!(options.mode, CalibrationMode::Recalibration { .. }) {
        // Scale comes from the fixed thin-lens parameters alone.
        problem.scale_constraints.clear();
    }
    let initial = problem.intrinsics;

    let (mut refined, mut report) = ba::solve(&problem, &options.solver)?;
    let mut rejected = 0;
    if let Some(thr) = options.reject_px {
        let before = refined.observations.len();
        let kept = refined
            .observations
            .retain(|o| ba::residual(&refined, o).is_ok_and(|r| r.norm() <= thr));
        rejected = before - kept.len();
        if rejected > 0 {
            debug!("rejected {rejected} observations above {thr} px");
            refined.observations = kept;
            let (r2, rep2) = ba::solve(&refined, &options.solver)?;
            refined = r2;
            report = rep2;
        }
    }

    let summary = StageSummary {
        clusters: clusters.measurements.len(),
        cluster_failures: clusters.failures.len(),
        registered_views: metric.num_registered(),
        triangulated_points: metric.num_triangulated(),
        pinhole_f_px: metric.f_px,
        pinhole_reprojection_px: metric.mean_reprojection_error(),
        metric_scale: scale,
        depth_samples: samples.len(),
        rejected_observations: rejected,
    };
    Ok(CalibrationResult {
        problem: refined,
        report,
        initial,
        pinhole: metric,
        summary,
    })
}
