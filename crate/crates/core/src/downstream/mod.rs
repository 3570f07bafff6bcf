//! Using a calibrated camera: metric depth from virtual depth, projection to
//! a common image plane for RGB-D consumers, metric point clouds and raw
//! undistortion tables.

mod ply;

pub use ply::{read_ply_vertex_count, write_ply};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PlenopticIntrinsics, Pose, VirtualPoint};
use crate::par;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DownstreamError {
    #[error("virtual depth {v} maps to image distance {b_l} at or in front of the focal length")]
    NonFiniteDepth { v: f64, b_l: f64 },
    #[error("virtual depth {0} is not a positive number")]
    InvalidVirtualDepth(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn image_distance(intr: &PlenopticIntrinsics, v: f64) -> Result<f64, DownstreamError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(DownstreamError::InvalidVirtualDepth(v));
    }
    Ok(v * intr.mla_sensor + intr.b_l0)
}

/// Object depth in front of the main lens (mm) for virtual depth `v`.
///
/// No upper bound is placed on `v`.
pub fn metric_depth(intr: &PlenopticIntrinsics, v: f64) -> Result<f64, DownstreamError> {
    let b_l = image_distance(intr, v)?;
    let z = 1.0 / (1.0 / intr.f_l - 1.0 / b_l);
    if !(b_l > intr.f_l) || !z.is_finite() {
        return Err(DownstreamError::NonFiniteDepth { v, b_l });
    }
    Ok(z)
}

/// Distance of the default projection plane from the micro lens array, in
/// units of `B`.
pub const DEFAULT_PLANE_V: f64 = 2.0;

/// Projects a virtual point through the main lens center onto the plane at
/// virtual depth `plane_v`.
pub fn central_perspective_project_at(
    intr: &PlenopticIntrinsics,
    vp: &VirtualPoint,
    plane_v: f64,
) -> Result<Vector2<f64>, DownstreamError> {
    let b_l = image_distance(intr, vp.v)?;
    let k = (plane_v * intr.mla_sensor + intr.b_l0) / b_l;
    Ok(Vector2::new(
        (vp.x - intr.c_x) * k + intr.c_x,
        (vp.y - intr.c_y) * k + intr.c_y,
    ))
}

/// [`central_perspective_project_at`] on the plane at `2B`.
pub fn central_perspective_project(
    intr: &PlenopticIntrinsics,
    vp: &VirtualPoint,
) -> Result<Vector2<f64>, DownstreamError> {
    central_perspective_project_at(intr, vp, DEFAULT_PLANE_V)
}

/// Focal length in pixels of the pinhole camera equivalent to projecting on
/// the plane at virtual depth `plane_v`.
pub fn equivalent_focal_px(intr: &PlenopticIntrinsics, plane_v: f64) -> (f64, f64) {
    let d = plane_v * intr.mla_sensor + intr.b_l0;
    (d / intr.s_x, d / intr.s_y)
}

/// Camera-frame point (mm) of a virtual point.
pub fn back_project(intr: &PlenopticIntrinsics, vp: &VirtualPoint) -> Result<Vector3<f64>, DownstreamError> {
    let z = metric_depth(intr, vp.v)?;
    let b_l = image_distance(intr, vp.v)?;
    let k = z / b_l;
    Ok(Vector3::new(
        (vp.x - intr.c_x) * intr.s_x * k,
        (vp.y - intr.c_y) * intr.s_y * k,
        z,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RgbdPoint {
    /// Pixel on the projection plane.
    pub x: f64,
    pub y: f64,
    /// Metric depth, millimeters.
    pub depth: f64,
}

/// Sparse depth image of a pinhole camera with focal lengths `f_x`, `f_y`
/// and principal point `(c_x, c_y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbdFrame {
    pub f_x: f64,
    pub f_y: f64,
    pub c_x: f64,
    pub c_y: f64,
    pub points: Vec<RgbdPoint>,
}

/// Projects virtual points onto the plane at `2B` and attaches metric depths.
pub fn export_rgbd_frame(
    intr: &PlenopticIntrinsics,
    virtual_points: &[VirtualPoint],
) -> Result<RgbdFrame, DownstreamError> {
    let (f_x, f_y) = equivalent_focal_px(intr, DEFAULT_PLANE_V);
    let points = virtual_points
        .iter()
        .map(|vp| {
            let p = central_perspective_project(intr, vp)?;
            Ok(RgbdPoint {
                x: p.x,
                y: p.y,
                depth: metric_depth(intr, vp.v)?,
            })
        })
        .collect::<Result<_, DownstreamError>>()?;
    Ok(RgbdFrame {
        f_x,
        f_y,
        c_x: intr.c_x,
        c_y: intr.c_y,
        points,
    })
}

/// World-frame points from per-view virtual points; `poses` are
/// camera-from-world.
pub fn export_point_cloud(
    intr: &PlenopticIntrinsics,
    poses: &[Pose],
    samples: &[(usize, VirtualPoint)],
) -> Result<Vec<Vector3<f64>>, DownstreamError> {
    samples
        .iter()
        .map(|(view, vp)| {
            let pose = poses
                .get(*view)
                .ok_or_else(|| ModelError::InvalidPose(format!("no pose for view {view}")))?;
            Ok(pose.inverse().transform(&back_project(intr, vp)?))
        })
        .collect()
}

/// Raw distorted to undistorted coordinates sampled every `step` pixels,
/// read back with bilinear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndistortionMap {
    pub width: f64,
    pub height: f64,
    pub step: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major, `ny` rows of `nx` nodes.
    pub table: Vec<[f64; 2]>,
}

impl UndistortionMap {
    /// Undistorted position of `p`. Queries outside the table are clamped
    /// to its border, signalled by the returned flag.
    pub fn lookup(&self, p: &Vector2<f64>) -> (Vector2<f64>, bool) {
        let max_x = (self.nx - 1) as f64 * self.step;
        let max_y = (self.ny - 1) as f64 * self.step;
        let q = Vector2::new(p.x.clamp(0.0, max_x), p.y.clamp(0.0, max_y));
        let clamped = q != *p;
        let gx = q.x / self.step;
        let gy = q.y / self.step;
        let ix = (gx.floor() as usize).min(self.nx.saturating_sub(2));
        let iy = (gy.floor() as usize).min(self.ny.saturating_sub(2));
        let (tx, ty) = (gx - ix as f64, gy - iy as f64);
        let at = |x: usize, y: usize| {
            let v = self.table[y * self.nx + x];
            Vector2::new(v[0], v[1])
        };
        let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
        let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
        // Corrections are interpolated rather than absolute positions so a
        // zero-distortion table is exact at every query.
        let corr = top * (1.0 - ty) + bottom * ty;
        (q + corr, clamped)
    }
}

/// Tabulates undistortion over a `width x height` sensor.
pub fn build_undistortion_map(
    intr: &PlenopticIntrinsics,
    width: f64,
    height: f64,
    step: f64,
) -> Result<UndistortionMap, DownstreamError> {
    if !(step > 0.0 && width > 0.0 && height > 0.0) {
        return Err(ModelError::InvalidGrid(format!("bad table size {width}x{height} step {step}")).into());
    }
    let nx = (width / step).ceil() as usize + 1;
    let ny = (height / step).ceil() as usize + 1;
    let c = Vector2::new(intr.c_x, intr.c_y);
    let rows = par::map_range(ny, |y| {
        (0..nx)
            .map(|x| {
                let d = Vector2::new(x as f64 * step, y as f64 * step);
                intr.distortion.undistort(&c, &d).map(|u| [u.x - d.x, u.y - d.y])
            })
            .collect::<Result<Vec<_>, _>>()
    });
    let mut table = Vec::with_capacity(nx * ny);
    for r in rows {
        table.extend(r?);
    }
    Ok(UndistortionMap {
        width,
        height,
        step,
        nx,
        ny,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::project_to_virtual;
    use crate::synthgen::default_intrinsics;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r5() -> PlenopticIntrinsics {
        PlenopticIntrinsics::r5_16mm()
    }

    #[test]
    fn depth_of_forward_example() {
        let intr = r5();
        let v = project_to_virtual(&intr, &Vector3::new(0.0, 0.0, 5000.0)).unwrap().v;
        assert!((v - 2.423637).abs() < 1e-6);
        assert!((metric_depth(&intr, v).unwrap() - 5000.0).abs() < 1e-9 * 5000.0);
        // The four-digit value is only good to about 0.3% at this range.
        let z = metric_depth(&intr, 2.4232).unwrap();
        assert!((z - 5000.0).abs() < 0.005 * 5000.0, "{z}");
    }

    #[test]
    fn focal_plane_is_singular() {
        let intr = r5();
        let v = (intr.f_l - intr.b_l0) / intr.mla_sensor;
        assert!(matches!(
            metric_depth(&intr, v),
            Err(DownstreamError::NonFiniteDepth { .. })
        ));
        assert!(matches!(
            metric_depth(&intr, v * 0.5),
            Err(DownstreamError::NonFiniteDepth { .. })
        ));
    }

    #[test]
    fn projection_at_two_b_is_identity() {
        let vp = VirtualPoint {
            x: 1234.5,
            y: 17.25,
            v: 2.0,
        };
        let p = central_perspective_project(&r5(), &vp).unwrap();
        assert_eq!((p.x, p.y), (vp.x, vp.y));
    }

    #[test]
    fn principal_ray_is_fixed() {
        let intr = r5();
        for v in [1.5, 3.0, 7.0] {
            let p = central_perspective_project(
                &intr,
                &VirtualPoint {
                    x: intr.c_x,
                    y: intr.c_y,
                    v,
                },
            )
            .unwrap();
            assert_eq!((p.x, p.y), (intr.c_x, intr.c_y));
        }
    }

    #[test]
    fn projection_at_v4() {
        let intr = r5();
        let vp = VirtualPoint {
            x: intr.c_x + 100.0,
            y: intr.c_y,
            v: 4.0,
        };
        let p = central_perspective_project(&intr, &vp).unwrap();
        assert!((p.x - intr.c_x - 100.0 * 16.645 / 17.397).abs() < 1e-9);
        assert!((p.x - intr.c_x - 95.678).abs() < 1e-3);
    }

    #[test]
    fn rgbd_round_trip_recovers_direction() {
        let intr = r5();
        let pts = [Vector3::new(120.0, -40.0, 900.0), Vector3::new(-300.0, 250.0, 1700.0)];
        let vps: Vec<_> = pts.iter().map(|x| project_to_virtual(&intr, x).unwrap()).collect();
        let frame = export_rgbd_frame(&intr, &vps).unwrap();
        for (x, p) in pts.iter().zip(&frame.points) {
            let ray = Vector3::new((p.x - frame.c_x) / frame.f_x, (p.y - frame.c_y) / frame.f_y, 1.0) * p.depth;
            assert!((ray - x).norm() < 1e-9 * x.norm());
        }
        assert!(export_rgbd_frame(&intr, &[]).unwrap().points.is_empty());
    }

    #[test]
    fn cloud_from_two_views_coincides() {
        let intr = r5();
        let x_w = Vector3::new(50.0, 80.0, 1200.0);
        let poses = [
            Pose::identity(),
            Pose::new(
                nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.1, 0.02)),
                Vector3::new(-100.0, 10.0, 30.0),
            ),
        ];
        let samples: Vec<_> = poses
            .iter()
            .enumerate()
            .map(|(k, p)| (k, project_to_virtual(&intr, &p.transform(&x_w)).unwrap()))
            .collect();
        for x in export_point_cloud(&intr, &poses, &samples).unwrap() {
            assert!((x - x_w).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_distortion_table_is_identity() {
        let map = build_undistortion_map(&r5(), 100.0, 60.0, 8.0).unwrap();
        let (p, clamped) = map.lookup(&Vector2::new(33.3, 41.7));
        assert_eq!(p, Vector2::new(33.3, 41.7));
        assert!(!clamped);
    }

    #[test]
    fn table_inverts_distortion() {
        let intr = default_intrinsics();
        let map = build_undistortion_map(&intr, 2048.0, 2048.0, 8.0).unwrap();
        let c = Vector2::new(intr.c_x, intr.c_y);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let u = Vector2::new(rng.random_range(10.0..2038.0), rng.random_range(10.0..2038.0));
            let (back, clamped) = map.lookup(&intr.distortion.distort(&c, &u));
            assert!(!clamped);
            worst = worst.max((back - u).norm());
        }
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn outside_queries_are_clamped() {
        let map = build_undistortion_map(&default_intrinsics(), 64.0, 64.0, 8.0).unwrap();
        let (p, clamped) = map.lookup(&Vector2::new(-5.0, 70.0));
        assert!(clamped);
        assert!(p.x.abs() < 10.0 && (p.y - 64.0).abs() < 10.0);
    }

    proptest! {
        #[test]
        fn depth_inverts_virtual_depth(x in -500.0..500.0f64, y in -500.0..500.0f64, z in 60.0..20000.0f64) {
            let intr = r5();
            let vp = project_to_virtual(&intr, &Vector3::new(x, y, z)).unwrap();
            let back = metric_depth(&intr, vp.v).unwrap();
            prop_assert!((back - z).abs() <= 1e-9 * z);
        }

        #[test]
        fn depth_decreases_with_virtual_depth(v in 0.5..50.0f64, dv in 1e-3..5.0f64) {
            let intr = r5();
            let (a, b) = (metric_depth(&intr, v), metric_depth(&intr, v + dv));
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!(b < a);
            }
        }
    }
}
