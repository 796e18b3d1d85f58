//! Quaternion and covariance algebra shared by the renderer, mapping and
//! tracking: Σ = R diag(s²) Rᵀ construction, disc normals, and the rotation
//! matrix partials needed by the backward pass.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};

/// Hard validity bound on quaternion norm for covariance construction.
/// Finite-difference probes perturb single components by ~1e-4, so the
/// constructor normalizes anything within this band instead of rejecting it.
pub const QUAT_NORM_TOL: f64 = 1e-3;

/// Two smallest scale components closer than this are treated as tied when
/// picking the disc normal axis.
pub const SCALE_TIE_TOL: f64 = 1e-9;

/// Normalize a quaternion stored as (w, x, y, z).
#[inline]
pub fn quat_normalize(q: Vector4<f64>) -> Vector4<f64> {
    q / q.norm()
}

pub fn quat_identity() -> Vector4<f64> {
    Vector4::new(1.0, 0.0, 0.0, 0.0)
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives ∂R/∂q_k of the unit-quaternion rotation matrix,
/// evaluated at q = (w, x, y, z). Ordered [∂/∂w, ∂/∂x, ∂/∂y, ∂/∂z].
pub fn quat_to_matrix_partials(q: Vector4<f64>) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [dw, dx, dy, dz]
}

/// Pull a gradient w.r.t. the rotation matrix back to the raw (possibly
/// denormalized) quaternion, including the normalization Jacobian.
pub fn quat_grad_from_matrix_grad(q_raw: Vector4<f64>, d_rot: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q_raw.norm();
    let q = q_raw / norm;
    let partials = quat_to_matrix_partials(q);
    let mut d_unit = Vector4::zeros();
    for k in 0..4 {
        d_unit[k] = d_rot.component_mul(&partials[k]).sum();
    }
    // d(q/|q|)/dq = (I - q̂ q̂ᵀ) / |q|
    (d_unit - q * q.dot(&d_unit)) / norm
}

/// Quaternion rotating unit vector `from` onto unit vector `to`.
pub fn quat_between(from: Vector3<f64>, to: Vector3<f64>) -> Vector4<f64> {
    let c = from.dot(&to);
    if c < -1.0 + 1e-12 {
        // Antiparallel: rotate π about any axis orthogonal to `from`.
        let axis = if from.x.abs() < 0.9 {
            from.cross(&Vector3::x()).normalize()
        } else {
            from.cross(&Vector3::y()).normalize()
        };
        return Vector4::new(0.0, axis.x, axis.y, axis.z);
    }
    let axis = from.cross(&to);
    let w = 1.0 + c;
    quat_normalize(Vector4::new(w, axis.x, axis.y, axis.z))
}

/// Normalized linear interpolation with hemisphere alignment.
pub fn quat_nlerp(a: Vector4<f64>, b: Vector4<f64>, w: f64) -> Vector4<f64> {
    let b = if a.dot(&b) < 0.0 { -b } else { b };
    quat_normalize(a * (1.0 - w) + b * w)
}

fn validate_scale(scale: Vector3<f64>) -> Result<()> {
    if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0)
        || !scale.iter().all(|s| s.is_finite())
    {
        return Err(Error::InvalidParameter(format!(
            "scale components must be strictly positive and finite, got {:?}",
            scale
        )));
    }
    Ok(())
}

/// Covariance Σ = R diag(s²) Rᵀ from a scale vector and a quaternion.
///
/// The quaternion may deviate from unit norm by at most [`QUAT_NORM_TOL`]
/// (it is re-normalized before use); larger deviations are rejected.
pub fn covariance_from(scale: Vector3<f64>, rotation: Vector4<f64>) -> Result<Matrix3<f64>> {
    validate_scale(scale)?;
    let norm = rotation.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
        return Err(Error::InvalidParameter(format!(
            "quaternion norm {} outside unit tolerance {}",
            norm, QUAT_NORM_TOL
        )));
    }
    let r = quat_to_matrix(rotation / norm);
    let d = Matrix3::from_diagonal(&scale.component_mul(&scale));
    Ok(r * d * r.transpose())
}

/// Index of the local axis whose scale is minimal. When the two smallest
/// scale components are tied within [`SCALE_TIE_TOL`], the third local axis
/// is used so the choice stays deterministic (discs are built as
/// (s, s, 0.1 s), so their normal is always the local z axis).
pub fn min_scale_axis(scale: Vector3<f64>) -> usize {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| scale[a].partial_cmp(&scale[b]).unwrap());
    if scale[order[1]] - scale[order[0]] < SCALE_TIE_TOL {
        2
    } else {
        order[0]
    }
}

/// The disc normal direction: rotation applied to the minimal-scale axis.
/// Sign is not fixed here; callers orient it toward an observing camera.
pub fn rotated_min_axis(scale: Vector3<f64>, rotation: Vector4<f64>) -> Vector3<f64> {
    let axis = min_scale_axis(scale);
    let r = quat_to_matrix(quat_normalize(rotation));
    r.column(axis).into()
}

/// Flip `normal` if needed so it points from `position` toward `viewer`.
pub fn orient_toward(normal: Vector3<f64>, position: Vector3<f64>, viewer: Vector3<f64>) -> Vector3<f64> {
    if normal.dot(&(viewer - position)) < 0.0 {
        -normal
    } else {
        normal
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn covariance_isotropic_is_identity() {
        let cov = covariance_from(Vector3::new(1.0, 1.0, 1.0), quat_identity()).unwrap();
        assert_relative_eq!(cov, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn covariance_axis_aligned() {
        let cov = covariance_from(Vector3::new(2.0, 1.0, 1.0), quat_identity()).unwrap();
        assert_relative_eq!(cov, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)), epsilon = 1e-12);
    }

    #[test]
    fn covariance_rotated_matches_eigendecomposition() {
        // 90° about x: local z axis maps to world y.
        let q = Vector4::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0);
        let cov = covariance_from(Vector3::new(1.0, 1.0, 0.1), q).unwrap();
        let eig = cov.symmetric_eigen();
        let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(vals[0], 0.01, epsilon = 1e-9);
        assert_relative_eq!(vals[1], 1.0, epsilon = 1e-9);
        assert_relative_eq!(vals[2], 1.0, epsilon = 1e-9);
        let (min_idx, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        let v: Vector3<f64> = eig.eigenvectors.column(min_idx).into();
        assert_relative_eq!(v.y.abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn covariance_rejects_bad_quaternion() {
        assert!(covariance_from(Vector3::new(1.0, 1.0, 1.0), Vector4::new(2.0, 0.0, 0.0, 0.0)).is_err());
        assert!(covariance_from(Vector3::new(-1.0, 1.0, 1.0), quat_identity()).is_err());
    }

    #[test]
    fn normal_of_axis_aligned_disc() {
        let n = rotated_min_axis(Vector3::new(1.0, 1.0, 0.1), quat_identity());
        assert_relative_eq!(n.z.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normal_of_rotated_disc() {
        let q = Vector4::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0, 0.0);
        let n = rotated_min_axis(Vector3::new(1.0, 1.0, 0.1), q);
        assert_relative_eq!(n.y.abs(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn normal_tie_break_uses_third_axis() {
        // Fully degenerate and two-smallest-tied cases resolve to local z.
        let n = rotated_min_axis(Vector3::new(1.0, 1.0, 1.0), quat_identity());
        assert_relative_eq!(n, Vector3::z(), epsilon = 1e-12);
        assert_eq!(min_scale_axis(Vector3::new(1.0, 0.1, 0.1)), 2);
        assert_eq!(min_scale_axis(Vector3::new(0.1, 1.0, 1.0)), 0);
    }

    #[test]
    fn matrix_partials_match_finite_differences() {
        let q = quat_normalize(Vector4::new(0.9, 0.2, -0.3, 0.1));
        let partials = quat_to_matrix_partials(q);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            // Partials are of the raw (non-normalized) matrix formula.
            let fd = (quat_to_matrix(qp) - quat_to_matrix(qm)) / (2.0 * h);
            assert_relative_eq!(partials[k], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn quat_between_aligns() {
        let n = Vector3::new(0.3, -0.5, 0.8).normalize();
        let q = quat_between(Vector3::z(), n);
        let got = quat_to_matrix(q) * Vector3::z();
        assert_relative_eq!(got, n, epsilon = 1e-12);
        let q = quat_between(Vector3::z(), -Vector3::z());
        let got = quat_to_matrix(q) * Vector3::z();
        assert_relative_eq!(got, -Vector3::z(), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            sx in 0.01f64..2.0, sy in 0.01f64..2.0, sz in 0.01f64..2.0,
            qw in -1.0f64..1.0, qx in -1.0f64..1.0, qy in -1.0f64..1.0, qz in -1.0f64..1.0,
        ) {
            prop_assume!(Vector4::new(qw, qx, qy, qz).norm() > 1e-3);
            let q = quat_normalize(Vector4::new(qw, qx, qy, qz));
            let s = Vector3::new(sx, sy, sz);
            let cov = covariance_from(s, q).unwrap();
            let mut eig: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = [sx * sx, sy * sy, sz * sz].to_vec();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, w) in eig.iter().zip(&want) {
                prop_assert!((e - w).abs() < 1e-9, "eig {} vs scale² {}", e, w);
            }
        }

        #[test]
        fn normal_orthogonal_to_longest_axis(
            qw in -1.0f64..1.0, qx in -1.0f64..1.0, qy in -1.0f64..1.0, qz in -1.0f64..1.0,
        ) {
            prop_assume!(Vector4::new(qw, qx, qy, qz).norm() > 1e-3);
            let q = quat_normalize(Vector4::new(qw, qx, qy, qz));
            let s = Vector3::new(0.8, 0.5, 0.1);
            let n = rotated_min_axis(s, q);
            let longest: Vector3<f64> = quat_to_matrix(q).column(0).into();
            prop_assert!(n.dot(&longest).abs() < 1e-6);
        }
    }
}
