//! Ground-truth synthetic datasets: camera, MLA, scene, trajectory and noisy
//! micro-image observations.

use nalgebra::{Point3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    micro_lens_center, project_full, project_to_virtual, DistortionCoeffs, MicroLensGrid, PlenopticIntrinsics,
    PointIndex, Pose,
};
use crate::observations::{Observation, ObservationSet};
use crate::plenoptic_init::ScaleConstraint;

const MAX_RESAMPLE: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid scene spec field `{field}`: {message}")]
    InvalidSpec { field: &'static str, message: String },
    #[error("point {point} could not be placed in two views after {attempts} attempts")]
    InsufficientVisibility { point: usize, attempts: usize },
}

/// Axis-aligned world-frame box, millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointVolume {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for PointVolume {
    fn default() -> Self {
        Self {
            min: [-450.0, -450.0, 600.0],
            max: [450.0, 450.0, 1900.0],
        }
    }
}

/// Camera path of a synthetic sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// Winding hand-held style motion towards the scene, looking at `target`.
    Winding {
        num_views: usize,
        #[serde(default = "default_amplitude")]
        amplitude: [f64; 3],
        #[serde(default = "default_start_z")]
        start_z: f64,
        #[serde(default = "default_target")]
        target: [f64; 3],
    },
    Explicit {
        poses: Vec<Pose>,
    },
}

fn default_amplitude() -> [f64; 3] {
    [300.0, 160.0, 420.0]
}
fn default_start_z() -> f64 {
    -180.0
}
fn default_target() -> [f64; 3] {
    [0.0, 0.0, 1250.0]
}

impl TrajectorySpec {
    pub fn winding(num_views: usize) -> Self {
        TrajectorySpec::Winding {
            num_views,
            amplitude: default_amplitude(),
            start_z: default_start_z(),
            target: default_target(),
        }
    }

    pub fn num_views(&self) -> usize {
        match self {
            TrajectorySpec::Winding { num_views, .. } => *num_views,
            TrajectorySpec::Explicit { poses } => poses.len(),
        }
    }

    pub fn poses(&self) -> Vec<Pose> {
        match self {
            TrajectorySpec::Explicit { poses } => poses.clone(),
            TrajectorySpec::Winding {
                num_views,
                amplitude,
                start_z,
                target,
            } => {
                let n = *num_views;
                let tau = std::f64::consts::TAU;
                (0..n)
                    .map(|i| {
                        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                        let eye = Point3::new(
                            amplitude[0] * (tau * 1.25 * t).sin(),
                            amplitude[1] * (tau * 2.1 * t + 0.3).sin(),
                            start_z + amplitude[2] * t,
                        );
                        let look = Point3::new(
                            target[0] + 0.15 * amplitude[0] * (tau * t).cos(),
                            target[1] + 0.15 * amplitude[1] * (1.5 * tau * t).sin(),
                            target[2],
                        );
                        let roll = 0.2 * (tau * 1.7 * t).sin();
                        let down = Vector3::new(roll.sin(), roll.cos(), 0.0);
                        Pose::look_at(&eye, &look, &down)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_points: usize,
    #[serde(default)]
    pub volume: PointVolume,
    pub trajectory: TrajectorySpec,
    /// Standard deviation of the Gaussian pixel noise per coordinate.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub outlier_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_num_constraints")]
    pub num_scale_constraints: usize,
}

fn default_num_constraints() -> usize {
    4
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_points: 1500,
            volume: PointVolume::default(),
            trajectory: TrajectorySpec::winding(70),
            noise_sigma: 0.2,
            outlier_fraction: 0.05,
            rng_seed: 1,
            num_scale_constraints: default_num_constraints(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |field, message: String| Err(SynthError::InvalidSpec { field, message });
        if self.num_points < 8 {
            return invalid("num_points", format!("need at least 8 points, got {}", self.num_points));
        }
        if self.trajectory.num_views() < 2 {
            return invalid(
                "num_views",
                format!("need at least 2 views, got {}", self.trajectory.num_views()),
            );
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return invalid(
                "noise_sigma",
                format!("must be a non-negative number, got {}", self.noise_sigma),
            );
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return invalid(
                "outlier_fraction",
                format!("must lie in [0, 1), got {}", self.outlier_fraction),
            );
        }
        for k in 0..3 {
            if !(self.volume.min[k] < self.volume.max[k]) {
                return invalid("volume", format!("min must be below max on axis {k}"));
            }
        }
        Ok(())
    }
}

/// Distortion used by default for synthetic cameras: a few pixels at the
/// sensor corners.
pub fn default_distortion() -> DistortionCoeffs {
    DistortionCoeffs {
        k0: 8e-10,
        k1: -1.5e-16,
        k2: 2e-23,
        p0: 2e-7,
        p1: -1.5e-7,
    }
}

/// The R5 / 16 mm camera with [`default_distortion`].
pub fn default_intrinsics() -> PlenopticIntrinsics {
    PlenopticIntrinsics {
        distortion: default_distortion(),
        ..PlenopticIntrinsics::r5_16mm()
    }
}

pub const DEFAULT_SENSOR: f64 = 2048.0;
pub const DEFAULT_PITCH: f64 = 23.0;

/// Hexagonally packed micro image centers covering the sensor. Rows are
/// `pitch * sqrt(3) / 2` apart and every other row is shifted by half a pitch.
pub fn generate_hex_grid(sensor_w: f64, sensor_h: f64, pitch: f64) -> Result<MicroLensGrid, SynthError> {
    if !(pitch >= 4.0) {
        return Err(SynthError::InvalidSpec {
            field: "pitch",
            message: format!("pitch must be at least 4 px, got {pitch}"),
        });
    }
    if !(sensor_w > 0.0 && sensor_h > 0.0) {
        return Err(SynthError::InvalidSpec {
            field: "sensor",
            message: "sensor dimensions must be positive".into(),
        });
    }
    let row_step = pitch * 3f64.sqrt() / 2.0;
    let mut centers = Vec::new();
    let single_column = pitch > sensor_w;
    let mut row = 0usize;
    let mut y = (pitch / 2.0).min(sensor_h / 2.0);
    while y <= sensor_h {
        if single_column {
            centers.push(Vector2::new(sensor_w / 2.0, y));
        } else {
            let mut x = if row.is_multiple_of(2) { pitch / 2.0 } else { pitch };
            while x <= sensor_w {
                centers.push(Vector2::new(x, y));
                x += pitch;
            }
        }
        row += 1;
        y += row_step;
    }
    let radius = 0.5 * pitch - 1.0;
    MicroLensGrid::new(centers, radius.max(0.5), sensor_w, sensor_h).map_err(|e| SynthError::InvalidSpec {
        field: "pitch",
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub intrinsics_gt: PlenopticIntrinsics,
    pub grid: MicroLensGrid,
    pub poses_gt: Vec<Pose>,
    pub points_gt: Vec<Vector3<f64>>,
    pub observations: ObservationSet,
    pub scale_constraints: Vec<ScaleConstraint>,
    /// `(point, view, lens)` of observations replaced by outliers, sorted.
    pub outliers: Vec<(usize, usize, usize)>,
    pub spec: SceneSpec,
}

impl SyntheticDataset {
    pub fn is_outlier(&self, o: &Observation) -> bool {
        self.outliers.binary_search(&(o.point, o.view, o.lens)).is_ok()
    }
}

/// Lens lookup for projecting points into every micro image that sees them.
pub(crate) struct LensFinder {
    index: PointIndex,
    /// Bound on |C_ML - C_I| plus distortion slack, pixels.
    slack: f64,
}

impl LensFinder {
    pub(crate) fn new(intr: &PlenopticIntrinsics, grid: &MicroLensGrid) -> Self {
        let c = Vector2::new(intr.c_x, intr.c_y);
        let mut slack: f64 = 0.0;
        let ml: Vec<Vector2<f64>> = grid
            .centers
            .iter()
            .map(|ci| {
                let cid = intr.distortion.distort(&c, ci);
                let cml = micro_lens_center(intr, &cid);
                slack = slack.max((cml - ci).norm() + (cid - ci).norm());
                cml
            })
            .collect();
        let cell = ml
            .get(1)
            .map(|p| (p - ml[0]).norm())
            .filter(|d| *d > 0.0)
            .unwrap_or(grid.micro_image_radius * 2.0);
        Self {
            index: PointIndex::new(&ml, cell),
            slack,
        }
    }

    /// Lenses whose micro image may contain the projection of `x_c`.
    pub(crate) fn candidates(
        &self,
        intr: &PlenopticIntrinsics,
        grid: &MicroLensGrid,
        x_c: &Vector3<f64>,
    ) -> Vec<usize> {
        let Ok(vp) = project_to_virtual(intr, x_c) else {
            return Vec::new();
        };
        if vp.v <= 1.0 {
            return Vec::new();
        }
        let radius = vp.v * (grid.micro_image_radius + 2.0 * self.slack + 2.0) + 2.0;
        self.index.within(&Vector2::new(vp.x, vp.y), radius)
    }
}

/// Noiseless observations of `x_w` in `view` whose position lies on the sensor.
fn visible_projections(
    intr: &PlenopticIntrinsics,
    grid: &MicroLensGrid,
    finder: &LensFinder,
    pose: &Pose,
    x_w: &Vector3<f64>,
) -> Vec<(usize, Vector2<f64>)> {
    let x_c = pose.transform(x_w);
    finder
        .candidates(intr, grid, &x_c)
        .into_iter()
        .filter_map(|lens| {
            project_full(intr, grid, pose, x_w, lens)
                .ok()
                .filter(|p| grid.in_sensor(p))
                .map(|p| (lens, p))
        })
        .collect()
}

pub fn generate(
    spec: &SceneSpec,
    intr_gt: &PlenopticIntrinsics,
    grid: &MicroLensGrid,
) -> Result<SyntheticDataset, SynthError> {
    spec.validate()?;
    intr_gt.validate().map_err(|e| SynthError::InvalidSpec {
        field: "intrinsics",
        message: e.to_string(),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let poses = spec.trajectory.poses();
    let finder = LensFinder::new(intr_gt, grid);
    let vol = spec.volume;

    let mut points = Vec::with_capacity(spec.num_points);
    let mut clean: Vec<Observation> = Vec::new();
    for point in 0..spec.num_points {
        let mut placed = None;
        for _ in 0..MAX_RESAMPLE {
            let x_w = Vector3::new(
                rng.random_range(vol.min[0]..vol.max[0]),
                rng.random_range(vol.min[1]..vol.max[1]),
                rng.random_range(vol.min[2]..vol.max[2]),
            );
            #[allow(clippy::type_complexity)]
            let per_view: Vec<(usize, Vec<(usize, Vector2<f64>)>)> = poses
                .iter()
                .enumerate()
                .map(|(view, pose)| (view, visible_projections(intr_gt, grid, &finder, pose, &x_w)))
                .filter(|(_, obs)| !obs.is_empty())
                .collect();
            let multi = per_view.iter().filter(|(_, o)| o.len() >= 2).count();
            let total: usize = per_view.iter().map(|(_, o)| o.len()).sum();
            if multi >= 2 && total >= 2 * per_view.len() {
                placed = Some((x_w, per_view));
                break;
            }
        }
        let Some((x_w, per_view)) = placed else {
            return Err(SynthError::InsufficientVisibility {
                point,
                attempts: MAX_RESAMPLE,
            });
        };
        points.push(x_w);
        for (view, obs) in per_view {
            for (lens, xy) in obs {
                clean.push(Observation { point, view, lens, xy });
            }
        }
    }

    let mut records = clean;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for r in &mut records {
            r.xy.x += normal.sample(&mut rng);
            r.xy.y += normal.sample(&mut rng);
        }
    }

    let mut outliers = Vec::new();
    let n_out = (spec.outlier_fraction * records.len() as f64).round() as usize;
    if n_out > 0 {
        let c = Vector2::new(intr_gt.c_x, intr_gt.c_y);
        let mut idx: Vec<usize> = (0..records.len()).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..n_out] {
            let r = &mut records[i];
            let center = intr_gt.distortion.distort(&c, &grid.centers[r.lens]);
            let radius = grid.micro_image_radius * rng.random::<f64>().sqrt();
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            r.xy = center + Vector2::new(radius * angle.cos(), radius * angle.sin());
            outliers.push((r.point, r.view, r.lens));
        }
        outliers.sort_unstable();
    }

    let scale_constraints = pick_scale_constraints(&points, spec.num_scale_constraints, &vol, &mut rng);
    let observations = ObservationSet::new(records).expect("generated observations are unique");
    Ok(SyntheticDataset {
        intrinsics_gt: *intr_gt,
        grid: grid.clone(),
        poses_gt: poses,
        points_gt: points,
        observations,
        scale_constraints,
        outliers,
        spec: spec.clone(),
    })
}

fn pick_scale_constraints(
    points: &[Vector3<f64>],
    count: usize,
    vol: &PointVolume,
    rng: &mut ChaCha8Rng,
) -> Vec<ScaleConstraint> {
    let diag = (Vector3::from(vol.max) - Vector3::from(vol.min)).norm();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 10_000 && points.len() >= 2 {
        attempts += 1;
        let a = rng.random_range(0..points.len());
        let b = rng.random_range(0..points.len());
        if a == b {
            continue;
        }
        let d = (points[a] - points[b]).norm();
        if d < 0.3 * diag {
            continue;
        }
        out.push(ScaleConstraint {
            point_a: a,
            point_b: b,
            distance: d,
            weight: 1.0,
        });
    }
    out
}

/// Default camera, grid and scene with the given size, noise and seed.
pub fn default_dataset(
    num_points: usize,
    num_views: usize,
    noise_sigma: f64,
    outlier_fraction: f64,
    seed: u64,
) -> Result<SyntheticDataset, SynthError> {
    let spec = SceneSpec {
        num_points,
        trajectory: TrajectorySpec::winding(num_views),
        noise_sigma,
        outlier_fraction,
        rng_seed: seed,
        ..SceneSpec::default()
    };
    let grid = generate_hex_grid(DEFAULT_SENSOR, DEFAULT_SENSOR, DEFAULT_PITCH)?;
    generate(&spec, &default_intrinsics(), &grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_grid_spacing_and_columns() {
        let grid = generate_hex_grid(2048.0, 2048.0, 23.0).unwrap();
        let first_row: Vec<_> = grid.centers.iter().filter(|c| c.y == grid.centers[0].y).collect();
        assert_eq!(first_row.len(), 89);
        assert_eq!(first_row.len(), (2048.0f64 / 23.0).floor() as usize);
        // interior nearest neighbor distance equals the pitch
        let index = PointIndex::new(&grid.centers, 23.0);
        let probe = grid
            .centers
            .iter()
            .position(|c| (c - Vector2::new(1024.0, 1024.0)).norm() < 20.0)
            .unwrap();
        let near: Vec<f64> = index
            .within(&grid.centers[probe], 30.0)
            .into_iter()
            .filter(|&i| i != probe)
            .map(|i| (grid.centers[i] - grid.centers[probe]).norm())
            .collect();
        assert_eq!(near.len(), 6);
        assert!(near.iter().all(|d| (d - 23.0).abs() < 1e-9));
        let mut keys: Vec<_> = grid.centers.iter().map(|c| (c.x.to_bits(), c.y.to_bits())).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), grid.centers.len());
    }

    #[test]
    fn oversized_pitch_gives_single_column() {
        let grid = generate_hex_grid(40.0, 200.0, 50.0).unwrap();
        assert!(grid.centers.iter().all(|c| c.x == 20.0));
        assert!(grid.len() >= 2);
    }

    #[test]
    fn spec_validation_names_field() {
        let spec = SceneSpec {
            num_points: 4,
            ..SceneSpec::default()
        };
        match spec.validate() {
            Err(SynthError::InvalidSpec { field, .. }) => assert_eq!(field, "num_points"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn noiseless_observations_reproduce_exactly() {
        let ds = default_dataset(40, 6, 0.0, 0.0, 3).unwrap();
        for o in ds.observations.records() {
            let p = project_full(
                &ds.intrinsics_gt,
                &ds.grid,
                &ds.poses_gt[o.view],
                &ds.points_gt[o.point],
                o.lens,
            )
            .unwrap();
            assert_eq!(p, o.xy);
        }
        for p in 0..ds.points_gt.len() {
            assert!(ds.observations.point_tracks(p).len() >= 2);
        }
    }

    #[test]
    fn same_seed_is_deterministic() {
        let a = default_dataset(30, 5, 0.3, 0.1, 11).unwrap();
        let b = default_dataset(30, 5, 0.3, 0.1, 11).unwrap();
        assert_eq!(a, b);
        let c = default_dataset(30, 5, 0.3, 0.1, 12).unwrap();
        assert_ne!(a.points_gt, c.points_gt);
    }
}
