use nalgebra::{Matrix2, SMatrix, Vector2, Vector3};

use super::{MicroLensGrid, ModelError, PlenopticIntrinsics, Pose, VirtualPoint, NUM_INTRINSIC_PARAMS};

/// Image distance of the main lens for an object at depth `z_c` (thin lens).
pub fn main_lens_image_distance(intr: &PlenopticIntrinsics, z_c: f64) -> Result<f64, ModelError> {
    let q = z_c - intr.f_l;
    if !(q > 0.0) || !z_c.is_finite() {
        return Err(ModelError::DegenerateDepth { z: z_c, f_l: intr.f_l });
    }
    Ok(intr.f_l * z_c / q)
}

/// Projects a camera-frame point (mm) into the virtual image.
///
/// The homogeneous scale of the projection is the object depth, so the
/// lateral coordinates are `b_L * x_C / z_C` in the (mirrored) virtual frame.
pub fn project_to_virtual(intr: &PlenopticIntrinsics, x_c: &Vector3<f64>) -> Result<VirtualPoint, ModelError> {
    let b_l = main_lens_image_distance(intr, x_c.z)?;
    let scale = b_l / x_c.z;
    let v = (b_l - intr.b_l0) / intr.mla_sensor;
    if !(v > 0.0) {
        return Err(ModelError::NonPositiveVirtualDepth { v });
    }
    Ok(VirtualPoint {
        x: scale * x_c.x / intr.s_x + intr.c_x,
        y: scale * x_c.y / intr.s_y + intr.c_y,
        v,
    })
}

/// Micro lens center for a micro image center: central scaling by
/// `b_L0 / (b_L0 + B)` about the principal point. The axial position of the
/// micro lens is `b_L0`.
pub fn micro_lens_center(intr: &PlenopticIntrinsics, image_center: &Vector2<f64>) -> Vector2<f64> {
    let c = Vector2::new(intr.c_x, intr.c_y);
    c + (image_center - c) * intr.center_scale()
}

/// Micro lens centers for all lenses of `grid`, derived from the distorted
/// micro image centers.
pub fn micro_lens_centers(intr: &PlenopticIntrinsics, grid: &MicroLensGrid) -> Vec<Vector2<f64>> {
    let c = Vector2::new(intr.c_x, intr.c_y);
    grid.centers
        .iter()
        .map(|ci| micro_lens_center(intr, &intr.distortion.distort(&c, ci)))
        .collect()
}

/// Reprojects a virtual point through the micro lens centered at `c_ml`.
pub fn project_virtual_to_raw(vp: &VirtualPoint, c_ml: &Vector2<f64>) -> Result<Vector2<f64>, ModelError> {
    if vp.v == 0.0 || !vp.v.is_finite() {
        return Err(ModelError::NonPositiveVirtualDepth { v: vp.v });
    }
    Ok(Vector2::new(
        (vp.x - c_ml.x) / vp.v + c_ml.x,
        (vp.y - c_ml.y) / vp.v + c_ml.y,
    ))
}

/// Distorted raw-image projection of camera-frame point `x_c` through the
/// micro lens whose (undistorted) micro image center is `image_center`.
/// No visibility test is performed.
pub fn project_micro(
    intr: &PlenopticIntrinsics,
    image_center: &Vector2<f64>,
    x_c: &Vector3<f64>,
) -> Result<Vector2<f64>, ModelError> {
    let vp = project_to_virtual(intr, x_c)?;
    if vp.v <= 1.0 {
        return Err(ModelError::VirtualDepthTooSmall { v: vp.v });
    }
    let c = Vector2::new(intr.c_x, intr.c_y);
    let c_id = intr.distortion.distort(&c, image_center);
    let c_ml = micro_lens_center(intr, &c_id);
    let x_r = project_virtual_to_raw(&vp, &c_ml)?;
    Ok(intr.distortion.distort(&c, &x_r))
}

/// Full projection of a world point into micro image `lens` of a view.
///
/// Fails with [`ModelError::OutOfMicroImage`] when the projection falls
/// outside the micro image, i.e. the point is not visible there.
pub fn project_full(
    intr: &PlenopticIntrinsics,
    grid: &MicroLensGrid,
    pose: &Pose,
    x_w: &Vector3<f64>,
    lens: usize,
) -> Result<Vector2<f64>, ModelError> {
    let center = grid.centers.get(lens).ok_or(ModelError::UnknownLens(lens))?;
    let x_c = pose.transform(x_w);
    let x_rd = project_micro(intr, center, &x_c)?;
    let c = Vector2::new(intr.c_x, intr.c_y);
    let distance = (x_rd - intr.distortion.distort(&c, center)).norm();
    if distance > grid.micro_image_radius {
        return Err(ModelError::OutOfMicroImage { lens, distance });
    }
    Ok(x_rd)
}

/// Derivatives of [`project_micro`] w.r.t. the intrinsic parameter vector and
/// the camera-frame point.
#[derive(Debug, Clone, Copy)]
pub struct MicroJacobian {
    pub intrinsics: SMatrix<f64, 2, NUM_INTRINSIC_PARAMS>,
    pub point: SMatrix<f64, 2, 3>,
}

/// Derivatives of the world-point projection. Pose columns are
/// `(omega, dt)` of the update in [`Pose::retract`].
#[derive(Debug, Clone, Copy)]
pub struct FullJacobian {
    pub intrinsics: SMatrix<f64, 2, NUM_INTRINSIC_PARAMS>,
    pub pose: SMatrix<f64, 2, 6>,
    pub point: SMatrix<f64, 2, 3>,
}

pub fn project_micro_with_jacobian(
    intr: &PlenopticIntrinsics,
    image_center: &Vector2<f64>,
    x_c: &Vector3<f64>,
) -> Result<(Vector2<f64>, MicroJacobian), ModelError> {
    let f = intr.f_l;
    let b0 = intr.b_l0;
    let bb = intr.mla_sensor;
    let (x, y, z) = (x_c.x, x_c.y, x_c.z);
    let q = z - f;
    if !(q > 0.0) || !z.is_finite() {
        return Err(ModelError::DegenerateDepth { z, f_l: f });
    }
    let a = f / q;
    let uw = Vector2::new(a * x / intr.s_x + intr.c_x, a * y / intr.s_y + intr.c_y);
    let b_l = a * z;
    let v = (b_l - b0) / bb;
    if !(v > 0.0) {
        return Err(ModelError::NonPositiveVirtualDepth { v });
    }
    if v <= 1.0 {
        return Err(ModelError::VirtualDepthTooSmall { v });
    }

    let dist = &intr.distortion;
    let c = Vector2::new(intr.c_x, intr.c_y);
    let jd_center = dist.displacement_jacobian(&c, image_center);
    let jk_center = dist.coeff_jacobian(&c, image_center);
    let c_id = dist.distort(&c, image_center);
    let sum = b0 + bb;
    let rho = b0 / sum;
    let m = c + (c_id - c) * rho;
    let iota = 1.0 / v;
    let x_r = uw * iota + m * (1.0 - iota);

    let q2 = q * q;
    let du_df = Vector2::new(x / intr.s_x, y / intr.s_y) * (z / q2);
    let dv_df = z * z / q2 / bb;
    let dv_dz = -f * f / q2 / bb;
    let dxr_dv = -(uw - m) / (v * v);
    let dm_db0 = (c_id - c) * (bb / (sum * sum));
    let dm_dbb = -(c_id - c) * (b0 / (sum * sum));
    let dm_dc = Matrix2::identity() * (1.0 - rho) - jd_center * rho;

    let mut jr = SMatrix::<f64, 2, NUM_INTRINSIC_PARAMS>::zeros();
    jr.set_column(0, &(du_df * iota + dxr_dv * dv_df));
    jr.set_column(1, &(dm_db0 * (1.0 - iota) - dxr_dv / bb));
    jr.set_column(2, &(dm_dbb * (1.0 - iota) - dxr_dv * (v / bb)));
    let dxr_dc = Matrix2::identity() * iota + dm_dc * (1.0 - iota);
    jr.fixed_view_mut::<2, 2>(0, 3).copy_from(&dxr_dc);
    jr.fixed_view_mut::<2, 5>(0, 5)
        .copy_from(&(jk_center * (rho * (1.0 - iota))));

    let mut jp = SMatrix::<f64, 2, 3>::zeros();
    jp[(0, 0)] = iota * a / intr.s_x;
    jp[(1, 1)] = iota * a / intr.s_y;
    jp[(0, 2)] = -iota * x * f / (intr.s_x * q2);
    jp[(1, 2)] = -iota * y * f / (intr.s_y * q2);
    let dv_dxc = Vector3::new(0.0, 0.0, dv_dz);
    jp += dxr_dv * dv_dxc.transpose();

    let jd_raw = dist.displacement_jacobian(&c, &x_r);
    let d_out = Matrix2::identity() + jd_raw;
    let mut j_intr = d_out * jr;
    let mut pp = j_intr.fixed_view_mut::<2, 2>(0, 3);
    pp -= jd_raw;
    let mut kk = j_intr.fixed_view_mut::<2, 5>(0, 5);
    kk += dist.coeff_jacobian(&c, &x_r);
    let j_point = d_out * jp;

    Ok((
        dist.distort(&c, &x_r),
        MicroJacobian {
            intrinsics: j_intr,
            point: j_point,
        },
    ))
}

/// [`project_micro`] composed with the pose, returning Jacobians for the
/// intrinsics, the pose update and the world point.
pub fn project_full_with_jacobian(
    intr: &PlenopticIntrinsics,
    image_center: &Vector2<f64>,
    pose: &Pose,
    x_w: &Vector3<f64>,
) -> Result<(Vector2<f64>, FullJacobian), ModelError> {
    let rx = pose.rotation * x_w;
    let x_c = rx + pose.translation;
    let (value, jm) = project_micro_with_jacobian(intr, image_center, &x_c)?;
    let mut jpose = SMatrix::<f64, 2, 6>::zeros();
    jpose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-jm.point * super::skew(&rx)));
    jpose.fixed_view_mut::<2, 3>(0, 3).copy_from(&jm.point);
    let jpoint = jm.point * pose.rotation_matrix();
    Ok((
        value,
        FullJacobian {
            intrinsics: jm.intrinsics,
            pose: jpose,
            point: jpoint,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DistortionCoeffs;

    fn intr() -> PlenopticIntrinsics {
        PlenopticIntrinsics::r5_16mm()
    }

    #[test]
    fn image_distance_limits() {
        let i = intr();
        assert!((main_lens_image_distance(&i, 1e12).unwrap() - 16.748).abs() < 1e-9);
        let bl = main_lens_image_distance(&i, 5000.0).unwrap();
        assert!((bl - 1.0 / (1.0 / 16.748 - 1.0 / 5000.0)).abs() < 1e-12);
        assert!((bl - 16.8042).abs() < 1e-4);
        assert!(matches!(
            main_lens_image_distance(&i, 16.748),
            Err(ModelError::DegenerateDepth { .. })
        ));
    }

    #[test]
    fn virtual_projection_examples() {
        let i = intr();
        let axial = project_to_virtual(&i, &Vector3::new(0.0, 0.0, 3000.0)).unwrap();
        assert_eq!((axial.x, axial.y), (i.c_x, i.c_y));
        let vp = project_to_virtual(&i, &Vector3::new(100.0, 0.0, 5000.0)).unwrap();
        let bl = 1.0 / (1.0 / 16.748 - 1.0 / 5000.0);
        assert!((vp.v - (bl - 15.893) / 0.376).abs() < 1e-12);
        assert!((vp.v - 2.4232).abs() < 1e-3);
        // With b_L0 < f_L the image distance never reaches b_L0; the boundary
        // v = 0 is only reachable for an (unvalidated) Keplerian setup.
        let mut kepler = i;
        kepler.b_l0 = 17.0;
        let z = 16.748 * 17.0 / (17.0 - 16.748);
        let r = project_to_virtual(&kepler, &Vector3::new(0.0, 0.0, z * (1.0 + 1e-9)));
        assert!(matches!(r, Err(ModelError::NonPositiveVirtualDepth { .. })));
    }

    #[test]
    fn micro_lens_center_examples() {
        let mut i = intr();
        let ci = Vector2::new(i.c_x + 100.0, i.c_y);
        let cml = micro_lens_center(&i, &ci);
        assert!((cml.x - i.c_x - 100.0 * 15.893 / 16.269).abs() < 1e-12);
        assert!((cml.x - i.c_x - 97.689).abs() < 1e-3);
        let at_c = Vector2::new(i.c_x, i.c_y);
        assert_eq!(micro_lens_center(&i, &at_c), at_c);
        i.mla_sensor = 0.0;
        assert_eq!(micro_lens_center(&i, &ci), ci);
    }

    #[test]
    fn virtual_to_raw_examples() {
        let c = Vector2::new(500.0, 700.0);
        let on_axis = VirtualPoint {
            x: 500.0,
            y: 700.0,
            v: 3.7,
        };
        assert_eq!(project_virtual_to_raw(&on_axis, &c).unwrap(), c);
        let unit = VirtualPoint {
            x: 520.0,
            y: 690.0,
            v: 1.0,
        };
        assert_eq!(project_virtual_to_raw(&unit, &c).unwrap(), Vector2::new(520.0, 690.0));
        let half = VirtualPoint {
            x: 546.0,
            y: 700.0,
            v: 2.0,
        };
        assert_eq!(project_virtual_to_raw(&half, &c).unwrap().x - 500.0, 23.0);
        let zero = VirtualPoint { x: 1.0, y: 1.0, v: 0.0 };
        assert!(project_virtual_to_raw(&zero, &c).is_err());
    }

    #[test]
    fn full_projection_of_axial_point_hits_central_lens() {
        let i = intr();
        let grid = MicroLensGrid::new(vec![Vector2::new(i.c_x, i.c_y)], 10.0, 2048.0, 2048.0).unwrap();
        let p = project_full(&i, &grid, &Pose::identity(), &Vector3::new(0.0, 0.0, 800.0), 0).unwrap();
        assert_eq!(p, Vector2::new(i.c_x, i.c_y));
        let behind = project_full(&i, &grid, &Pose::identity(), &Vector3::new(0.0, 0.0, -800.0), 0);
        assert!(matches!(behind, Err(ModelError::DegenerateDepth { .. })));
    }

    #[test]
    fn out_of_micro_image_is_reported() {
        let i = intr();
        let grid = MicroLensGrid::new(vec![Vector2::new(i.c_x, i.c_y)], 10.0, 2048.0, 2048.0).unwrap();
        let r = project_full(&i, &grid, &Pose::identity(), &Vector3::new(100.0, 0.0, 800.0), 0);
        assert!(matches!(r, Err(ModelError::OutOfMicroImage { lens: 0, .. })));
    }

    #[test]
    fn disparity_identity_between_two_lenses() {
        let i = intr();
        let vp = project_to_virtual(&i, &Vector3::new(35.0, -20.0, 900.0)).unwrap();
        let ck = Vector2::new(1200.0, 1000.0);
        let cl = Vector2::new(1223.0, 1011.0);
        let xk = project_virtual_to_raw(&vp, &ck).unwrap();
        let xl = project_virtual_to_raw(&vp, &cl).unwrap();
        let lhs = xk - xl;
        let rhs = (ck - cl) * (1.0 - 1.0 / vp.v);
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn analytic_jacobian_matches_central_differences() {
        let mut i = intr();
        i.distortion = DistortionCoeffs {
            k0: 8e-10,
            k1: -1.5e-16,
            k2: 2e-23,
            p0: 2e-7,
            p1: -1.5e-7,
        };
        let center = Vector2::new(1500.0, 400.0);
        let pose = Pose::new(
            nalgebra::UnitQuaternion::from_euler_angles(0.05, -0.1, 0.2),
            Vector3::new(30.0, -10.0, 50.0),
        );
        let x_w = Vector3::new(250.0, -300.0, 700.0);
        let (_, jac) = project_full_with_jacobian(&i, &center, &pose, &x_w).unwrap();
        let base = i.to_array();
        for k in 0..NUM_INTRINSIC_PARAMS {
            let h = 1e-6 * crate::model::IntrinsicParam::ALL[k].typical_scale(base[k]);
            let mut p = base;
            let mut m = base;
            p[k] += h;
            m[k] -= h;
            let fp = project_micro(&i.with_array(&p), &center, &pose.transform(&x_w)).unwrap();
            let fm = project_micro(&i.with_array(&m), &center, &pose.transform(&x_w)).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let an = jac.intrinsics.column(k);
            let err = (fd - an).norm() / an.norm().max(1e-12);
            assert!(err < 1e-5, "intrinsic {k}: rel err {err}, fd {fd:?} an {an:?}");
        }
    }
}
