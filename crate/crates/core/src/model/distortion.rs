//! Radial (three coefficients) plus tangential (two coefficients) distortion
//! applied directly on raw sensor coordinates, measured from the main lens
//! principal point.

use nalgebra::{Matrix2, SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Convergence threshold of [`DistortionCoeffs::undistort`], pixels.
pub const UNDISTORT_TOLERANCE: f64 = 1e-9;
pub const UNDISTORT_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistortionCoeffs {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub p0: f64,
    pub p1: f64,
}

impl DistortionCoeffs {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::zero()
    }

    /// Displacement added to `p` by the distortion model.
    pub fn displacement(&self, principal: &Vector2<f64>, p: &Vector2<f64>) -> Vector2<f64> {
        let d = p - principal;
        let r2 = d.norm_squared();
        let radial = r2 * (self.k0 + r2 * (self.k1 + r2 * self.k2));
        Vector2::new(
            d.x * radial + self.p0 * (r2 + 2.0 * d.x * d.x) + 2.0 * self.p1 * d.x * d.y,
            d.y * radial + self.p1 * (r2 + 2.0 * d.y * d.y) + 2.0 * self.p0 * d.x * d.y,
        )
    }

    pub fn distort(&self, principal: &Vector2<f64>, p: &Vector2<f64>) -> Vector2<f64> {
        p + self.displacement(principal, p)
    }

    /// Jacobian of the displacement with respect to the point. The Jacobian
    /// of `distort` w.r.t. the point is `I + J`, w.r.t. the principal point `-J`.
    pub fn displacement_jacobian(&self, principal: &Vector2<f64>, p: &Vector2<f64>) -> Matrix2<f64> {
        let d = p - principal;
        let r2 = d.norm_squared();
        let radial = r2 * (self.k0 + r2 * (self.k1 + r2 * self.k2));
        let dradial = self.k0 + r2 * (2.0 * self.k1 + 3.0 * r2 * self.k2);
        let xy = 2.0 * d.x * d.y * dradial;
        Matrix2::new(
            radial + 2.0 * d.x * d.x * dradial + 6.0 * self.p0 * d.x + 2.0 * self.p1 * d.y,
            xy + 2.0 * self.p0 * d.y + 2.0 * self.p1 * d.x,
            xy + 2.0 * self.p1 * d.x + 2.0 * self.p0 * d.y,
            radial + 2.0 * d.y * d.y * dradial + 6.0 * self.p1 * d.y + 2.0 * self.p0 * d.x,
        )
    }

    /// Jacobian of `distort` w.r.t. `(k0, k1, k2, p0, p1)`.
    pub fn coeff_jacobian(&self, principal: &Vector2<f64>, p: &Vector2<f64>) -> SMatrix<f64, 2, 5> {
        let d = p - principal;
        let r2 = d.norm_squared();
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        let xy2 = 2.0 * d.x * d.y;
        SMatrix::<f64, 2, 5>::new(
            d.x * r2,
            d.x * r4,
            d.x * r6,
            r2 + 2.0 * d.x * d.x,
            xy2,
            d.y * r2,
            d.y * r4,
            d.y * r6,
            xy2,
            r2 + 2.0 * d.y * d.y,
        )
    }

    /// Inverts [`distort`](Self::distort) by Newton iteration.
    pub fn undistort(&self, principal: &Vector2<f64>, distorted: &Vector2<f64>) -> Result<Vector2<f64>, ModelError> {
        self.undistort_with(principal, distorted, UNDISTORT_MAX_ITER)
    }

    pub fn undistort_with(
        &self,
        principal: &Vector2<f64>,
        distorted: &Vector2<f64>,
        max_iter: usize,
    ) -> Result<Vector2<f64>, ModelError> {
        if self.is_zero() {
            return Ok(*distorted);
        }
        let mut x = *distorted;
        for _ in 0..max_iter {
            let err = self.distort(principal, &x) - distorted;
            if err.norm() < UNDISTORT_TOLERANCE {
                return Ok(x);
            }
            let jac = Matrix2::identity() + self.displacement_jacobian(principal, &x);
            if jac.determinant() <= 0.0 {
                break;
            }
            match jac.try_inverse() {
                Some(inv) => x -= inv * err,
                None => break,
            }
            if !(x.x.is_finite() && x.y.is_finite()) {
                break;
            }
        }
        let err = self.distort(principal, &x) - distorted;
        if err.norm() < UNDISTORT_TOLERANCE {
            Ok(x)
        } else {
            Err(ModelError::NoConvergence {
                x: distorted.x,
                y: distorted.y,
            })
        }
    }

    /// Checks that the mapping is orientation preserving (positive Jacobian
    /// determinant) on a `samples x samples` grid covering the sensor.
    pub fn check_invertible(
        &self,
        principal: &Vector2<f64>,
        width: f64,
        height: f64,
        samples: usize,
    ) -> Result<(), ModelError> {
        let n = samples.max(2);
        for i in 0..n {
            for j in 0..n {
                let p = Vector2::new(width * i as f64 / (n - 1) as f64, height * j as f64 / (n - 1) as f64);
                let jac = Matrix2::identity() + self.displacement_jacobian(principal, &p);
                if jac.determinant() <= 0.0 {
                    return Err(ModelError::NonInvertibleDistortion { x: p.x, y: p.y });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c() -> Vector2<f64> {
        Vector2::new(1018.7, 1054.2)
    }

    fn typical_coeffs() -> DistortionCoeffs {
        DistortionCoeffs {
            k0: 8e-10,
            k1: -1.5e-16,
            k2: 2e-23,
            p0: 2e-7,
            p1: -1.5e-7,
        }
    }

    #[test]
    fn zero_coefficients_are_identity() {
        let p = Vector2::new(13.0, 1999.5);
        assert_eq!(DistortionCoeffs::zero().distort(&c(), &p), p);
        assert_eq!(DistortionCoeffs::zero().undistort(&c(), &p).unwrap(), p);
    }

    #[test]
    fn principal_point_is_fixed() {
        let d = typical_coeffs();
        assert_eq!(d.distort(&c(), &c()), c());
    }

    #[test]
    fn single_radial_term_hand_value() {
        let d = DistortionCoeffs {
            k0: 1e-9,
            ..Default::default()
        };
        let p = c() + Vector2::new(500.0, 0.0);
        let delta = d.distort(&c(), &p) - p;
        assert!((delta.x - 0.125).abs() < 1e-12);
        assert_eq!(delta.y, 0.0);
    }

    #[test]
    fn tangential_terms_hand_value() {
        let d = DistortionCoeffs {
            p0: 1e-6,
            p1: 2e-6,
            ..Default::default()
        };
        // x' = 100, y' = 50, r^2 = 12500
        let p = c() + Vector2::new(100.0, 50.0);
        let delta = d.displacement(&c(), &p);
        let dx = 1e-6 * (12500.0 + 2.0 * 10000.0) + 2.0 * 2e-6 * 5000.0;
        let dy = 2e-6 * (12500.0 + 2.0 * 2500.0) + 2.0 * 1e-6 * 5000.0;
        assert!((delta.x - dx).abs() < 1e-15);
        assert!((delta.y - dy).abs() < 1e-15);
    }

    #[test]
    fn round_trip_with_small_radial() {
        let d = DistortionCoeffs {
            k0: 1e-9,
            ..Default::default()
        };
        for &(x, y) in &[(0.0, 0.0), (2047.0, 2047.0), (10.0, 1800.0), (1500.0, 300.0)] {
            let p = Vector2::new(x, y);
            let back = d.undistort(&c(), &d.distort(&c(), &p)).unwrap();
            assert!((back - p).norm() < 1e-8);
        }
    }

    #[test]
    fn non_monotone_radial_has_no_inverse() {
        // r (1 + k0 r^2) peaks at r = 1/sqrt(-3 k0) ~ 577 px with value ~385 px.
        let d = DistortionCoeffs {
            k0: -1e-6,
            ..Default::default()
        };
        let r_peak = (1.0 / (3.0 * 1e-6f64)).sqrt();
        let peak = r_peak * (1.0 - 1e-6 * r_peak * r_peak);
        let target = c() + Vector2::new(peak + 100.0, 0.0);
        assert!(matches!(
            d.undistort(&c(), &target),
            Err(ModelError::NoConvergence { .. })
        ));
        assert!(d.check_invertible(&c(), 2048.0, 2048.0, 64).is_err());
        assert!(typical_coeffs().check_invertible(&c(), 2048.0, 2048.0, 64).is_ok());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let d = typical_coeffs();
        let p = Vector2::new(1700.0, 250.0);
        let h = 1e-4;
        let jac = Matrix2::identity() + d.displacement_jacobian(&c(), &p);
        for k in 0..2 {
            let mut e = Vector2::zeros();
            e[k] = h;
            let fd = (d.distort(&c(), &(p + e)) - d.distort(&c(), &(p - e))) / (2.0 * h);
            assert!((fd - jac.column(k)).norm() < 1e-7);
        }
        let cj = d.coeff_jacobian(&c(), &p);
        let base = [d.k0, d.k1, d.k2, d.p0, d.p1];
        let scales = [1e-6, 1e-12, 1e-18, 1e-3, 1e-3];
        for k in 0..5 {
            let step = 1e-6 * scales[k];
            let mut plus = base;
            let mut minus = base;
            plus[k] += step;
            minus[k] -= step;
            let mk = |a: [f64; 5]| DistortionCoeffs {
                k0: a[0],
                k1: a[1],
                k2: a[2],
                p0: a[3],
                p1: a[4],
            };
            let fd = (mk(plus).distort(&c(), &p) - mk(minus).distort(&c(), &p)) / (2.0 * step);
            let rel = (fd - cj.column(k)).norm() / cj.column(k).norm();
            assert!(rel < 1e-6, "coefficient {k}: {rel}");
        }
    }

    proptest! {
        #[test]
        fn undistort_inverts_distort(x in 0.0f64..2048.0, y in 0.0f64..2048.0) {
            let d = typical_coeffs();
            let p = Vector2::new(x, y);
            let back = d.undistort(&c(), &d.distort(&c(), &p)).unwrap();
            prop_assert!((back - p).norm() < 1e-8);
        }
    }
}
