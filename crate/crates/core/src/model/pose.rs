use nalgebra::{Matrix3, Point3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Camera-from-world rigid transform: `X_C = R * X_W + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Builds a pose from raw quaternion components, checking the unit norm.
    pub fn from_parts(w: f64, x: f64, y: f64, z: f64, translation: Vector3<f64>) -> Result<Self, ModelError> {
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidPose(format!(
                "quaternion norm {} differs from 1",
                q.norm()
            )));
        }
        Ok(Self::new(UnitQuaternion::new_unchecked(q), translation))
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Pose of a camera at `eye` whose optical (+z) axis points at `target`.
    /// The camera y axis is aligned as well as possible with `down`.
    pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>, down: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = down.cross(&z).normalize();
        let y = z.cross(&x);
        // Rows of the camera-from-world rotation are the camera axes in world.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye.coords);
        Self::from_rotation_matrix(&r, t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Local update `R <- exp(omega) R`, `t <- t + dt`, followed by renormalization.
    pub fn retract(&self, omega: &Vector3<f64>, dt: &Vector3<f64>) -> Self {
        let mut rotation = UnitQuaternion::from_scaled_axis(*omega) * self.rotation;
        rotation.renormalize();
        Self::new(rotation, self.translation + dt)
    }

    pub fn is_normalized(&self) -> bool {
        (self.rotation.quaternion().norm() - 1.0).abs() <= 1e-9
    }
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Point3::new(100.0, -50.0, -200.0);
        let target = Point3::new(0.0, 0.0, 1000.0);
        let pose = Pose::look_at(&eye, &target, &Vector3::new(0.0, 1.0, 0.0));
        let t = pose.transform(&target.coords);
        assert!(t.x.abs() < 1e-9 && t.y.abs() < 1e-9 && t.z > 0.0);
        assert!((pose.center() - eye.coords).norm() < 1e-9);
    }

    #[test]
    fn inverse_and_compose() {
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let id = pose.compose(&pose.inverse());
        assert!(id.translation.norm() < 1e-12);
        assert!(id.rotation.angle() < 1e-12);
    }

    #[test]
    fn from_parts_checks_norm() {
        assert!(Pose::from_parts(1.0, 0.1, 0.0, 0.0, Vector3::zeros()).is_err());
        assert!(Pose::from_parts(1.0, 0.0, 0.0, 0.0, Vector3::zeros()).is_ok());
    }

    #[test]
    fn retract_keeps_unit_norm() {
        let mut pose = Pose::identity();
        for _ in 0..1000 {
            pose = pose.retract(&Vector3::new(0.01, -0.02, 0.005), &Vector3::zeros());
        }
        assert!(pose.is_normalized());
    }
}
