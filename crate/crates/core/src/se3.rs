//! Rigid transforms and the se(3) exponential/logarithm.
//!
//! A [`Pose`] is world-from-camera: `p_world = R p_cam + t`. Increments are
//! 6-vectors ξ = (ρ, φ) with the translational part first, applied as
//! `exp(ξ) ∘ T`.

use nalgebra::{Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{quat_normalize, quat_to_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

fn skew(v: Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// From translation plus quaternion (qx, qy, qz, qw), the trajectory-file order.
    pub fn from_translation_quaternion_xyzw(t: Vector3<f64>, q_xyzw: [f64; 4]) -> Self {
        let q = quat_normalize(nalgebra::Vector4::new(q_xyzw[3], q_xyzw[0], q_xyzw[1], q_xyzw[2]));
        Self { rotation: quat_to_matrix(q), translation: t }
    }

    /// Rotation as quaternion (qx, qy, qz, qw).
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let r = &self.rotation;
        let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (r[(2, 1)] - r[(1, 2)]) / s;
            y = (r[(0, 2)] - r[(2, 0)]) / s;
            z = (r[(1, 0)] - r[(0, 1)]) / s;
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(2, 1)] - r[(1, 2)]) / s;
            x = 0.25 * s;
            y = (r[(0, 1)] + r[(1, 0)]) / s;
            z = (r[(0, 2)] + r[(2, 0)]) / s;
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            w = (r[(0, 2)] - r[(2, 0)]) / s;
            x = (r[(0, 1)] + r[(1, 0)]) / s;
            y = 0.25 * s;
            z = (r[(1, 2)] + r[(2, 1)]) / s;
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            w = (r[(1, 0)] - r[(0, 1)]) / s;
            x = (r[(0, 2)] + r[(2, 0)]) / s;
            y = (r[(1, 2)] + r[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        [x / n, y / n, z / n, w / n]
    }

    pub fn validate(&self) -> Result<()> {
        let should_be_identity = self.rotation.transpose() * self.rotation;
        if (should_be_identity - Matrix3::identity()).norm() > 1e-6 {
            return Err(Error::InvalidParameter("pose rotation is not orthonormal".into()));
        }
        if (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter("pose rotation must have det +1".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("pose translation must be finite".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Angle of the relative rotation to `other`, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Project the rotation back onto SO(3) (polar decomposition).
    pub fn renormalize_rotation(&mut self) {
        let svd = self.rotation.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        self.rotation = r;
    }
}

/// Exponential map of ξ = (ρ, φ): rotation by Rodrigues, translation V(φ)ρ.
pub fn se3_exp(xi: Vector6<f64>) -> Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let (rotation, v) = if theta < 1e-9 {
        (
            Matrix3::identity() + k + k2 * 0.5,
            Matrix3::identity() + k * 0.5 + k2 * (1.0 / 6.0),
        )
    } else {
        let t2 = theta * theta;
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / t2;
        let c = (theta - theta.sin()) / (t2 * theta);
        (
            Matrix3::identity() + k * a + k2 * b,
            Matrix3::identity() + k * b + k2 * c,
        )
    };
    Pose { rotation, translation: v * rho }
}

/// Logarithm map; inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &Pose) -> Vector6<f64> {
    let r = &pose.rotation;
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = c.acos();
    let phi = if theta < 1e-9 {
        Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) * 0.5,
            (r[(0, 2)] - r[(2, 0)]) * 0.5,
            (r[(1, 0)] - r[(0, 1)]) * 0.5,
        )
    } else {
        let factor = theta / (2.0 * theta.sin());
        Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) * factor,
            (r[(0, 2)] - r[(2, 0)]) * factor,
            (r[(1, 0)] - r[(0, 1)]) * factor,
        )
    };
    let k = skew(phi);
    let k2 = k * k;
    let v_inv = if theta < 1e-9 {
        Matrix3::identity() - k * 0.5 + k2 * (1.0 / 12.0)
    } else {
        let half = theta * 0.5;
        let cot_term = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - k * 0.5 + k2 * cot_term
    };
    let rho = v_inv * pose.translation;
    Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
}
