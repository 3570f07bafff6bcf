//! Virtual-image coordinates and virtual depth of every `(point, view)`
//! cluster of micro-image observations.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::model::{micro_lens_center, MicroLensGrid, PlenopticIntrinsics};
use crate::observations::ObservationSet;
use crate::par;

/// Pinhole measurement derived from one micro-image cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeMeasurement {
    pub point: usize,
    pub view: usize,
    /// Virtual-image coordinates, pixels.
    pub xy: Vector2<f64>,
    /// Virtual depth.
    pub v: f64,
    /// Micro images used in the fit.
    pub lenses: usize,
    /// RMS residual of the cluster fit, pixels.
    pub fit_rms: f64,
}

/// Why a cluster produced no measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterFailure {
    /// Fewer than two distinct micro lenses.
    SingularCluster,
    /// The fit placed the virtual image in front of the sensor.
    InvalidDepth,
    /// Undistortion of an observation failed.
    Undistortion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidOptions {
    /// Observations whose fit residual exceeds this are dropped one at a
    /// time, worst first, while at least `min_keep` remain.
    pub outlier_px: f64,
    pub min_keep: usize,
}

impl Default for CentroidOptions {
    fn default() -> Self {
        Self {
            outlier_px: 2.0,
            min_keep: 3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CentroidResult {
    /// Sorted by `(point, view)`.
    pub measurements: Vec<PinholeMeasurement>,
    pub failures: Vec<(usize, usize, ClusterFailure)>,
    /// Observations discarded by the robust fit.
    pub dropped_observations: usize,
}

/// Virtual depth from two micro images whose (micro lens) centers differ by
/// `c_k - c_l` and whose observations differ by `x_k - x_l`.
pub fn two_lens_virtual_depth(
    c_k: &Vector2<f64>,
    c_l: &Vector2<f64>,
    x_k: &Vector2<f64>,
    x_l: &Vector2<f64>,
) -> Option<f64> {
    let dc = c_k - c_l;
    let dx = x_k - x_l;
    let den = dc.dot(&(dc - dx));
    if den.abs() < 1e-12 || dc.norm_squared() < 1e-12 {
        return None;
    }
    Some(dc.norm_squared() / den)
}

/// Least-squares `(x_V', y_V', 1/v)` from raw points `x` behind lens
/// centers `m`: `x - m = a - ι·m` with `a = ι·x_V'`.
fn fit_cluster(m: &[Vector2<f64>], x: &[Vector2<f64>]) -> Option<(Vector3<f64>, Vec<f64>)> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for (mi, xi) in m.iter().zip(x) {
        let r = xi - mi;
        let rx = Vector3::new(1.0, 0.0, -mi.x);
        let ry = Vector3::new(0.0, 1.0, -mi.y);
        ata += rx * rx.transpose() + ry * ry.transpose();
        atb += rx * r.x + ry * r.y;
    }
    // Rank deficiency shows up as vanishing spread of the lens centers.
    let mean = m.iter().sum::<Vector2<f64>>() / m.len() as f64;
    let spread: f64 = m.iter().map(|c| (c - mean).norm_squared()).sum();
    if spread < 1e-6 {
        return None;
    }
    let sol = ata.cholesky()?.solve(&atb);
    let res = m
        .iter()
        .zip(x)
        .map(|(mi, xi)| {
            let pred = Vector2::new(sol.x, sol.y) - mi * sol.z + mi;
            (pred - xi).norm()
        })
        .collect();
    Some((sol, res))
}

/// Fits every `(point, view)` cluster.
///
/// Micro lens centers follow `intr_guess` (`B = 0` puts them on the micro
/// image centers); observations are undistorted with its distortion.
pub fn virtual_track_centroids(
    obs: &ObservationSet,
    grid: &MicroLensGrid,
    intr_guess: &PlenopticIntrinsics,
    options: &CentroidOptions,
) -> CentroidResult {
    let c = Vector2::new(intr_guess.c_x, intr_guess.c_y);
    let dist = &intr_guess.distortion;
    let undistorted = !dist.is_zero();
    let centers: Vec<Vector2<f64>> = grid
        .centers
        .iter()
        .map(|ci| micro_lens_center(intr_guess, &dist.distort(&c, ci)))
        .collect();
    let tracks = obs.tracks();
    let chunk = par::chunk_size(tracks.len(), 256, 64);
    let parts = par::map_chunks(tracks, chunk, |_, ts| {
        let mut meas = Vec::new();
        let mut fails = Vec::new();
        let mut dropped = 0;
        'track: for t in ts {
            let recs = obs.track_records(t);
            let mut m = Vec::with_capacity(recs.len());
            let mut x = Vec::with_capacity(recs.len());
            for r in recs {
                let xr = if undistorted {
                    match dist.undistort(&c, &r.xy) {
                        Ok(p) => p,
                        Err(_) => {
                            fails.push((t.point, t.view, ClusterFailure::Undistortion));
                            continue 'track;
                        }
                    }
                } else {
                    r.xy
                };
                m.push(centers[r.lens]);
                x.push(xr);
            }
            if m.len() < 2 {
                fails.push((t.point, t.view, ClusterFailure::SingularCluster));
                continue;
            }
            let Some((mut sol, mut res)) = fit_cluster(&m, &x) else {
                fails.push((t.point, t.view, ClusterFailure::SingularCluster));
                continue;
            };
            while m.len() > options.min_keep.max(2) {
                let (worst, wr) = res
                    .iter()
                    .enumerate()
                    .fold((0, 0.0), |acc, (i, r)| if *r > acc.1 { (i, *r) } else { acc });
                if wr <= options.outlier_px {
                    break;
                }
                m.remove(worst);
                x.remove(worst);
                dropped += 1;
                match fit_cluster(&m, &x) {
                    Some((s, r)) => {
                        sol = s;
                        res = r;
                    }
                    None => {
                        fails.push((t.point, t.view, ClusterFailure::SingularCluster));
                        continue 'track;
                    }
                }
            }
            let iota = sol.z;
            if !(iota > 0.0 && iota < 1.0) {
                fails.push((t.point, t.view, ClusterFailure::InvalidDepth));
                continue;
            }
            let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
            meas.push(PinholeMeasurement {
                point: t.point,
                view: t.view,
                xy: Vector2::new(sol.x / iota, sol.y / iota),
                v: 1.0 / iota,
                lenses: m.len(),
                fit_rms: rms,
            });
        }
        (meas, fails, dropped)
    });
    let mut out = CentroidResult::default();
    for (m, f, d) in parts {
        out.measurements.extend(m);
        out.failures.extend(f);
        out.dropped_observations += d;
    }
    out
}
