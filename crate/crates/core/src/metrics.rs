//! Evaluation metrics: absolute trajectory error after rigid alignment,
//! PSNR, and the depth accuracy ratio.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::preproc::depth_valid;
use crate::se3::Pose;
use crate::types::DEPTH_NO_HIT;

/// Timestamp association window, seconds (the TUM convention).
pub const ASSOCIATION_MAX_GAP: f64 = 0.02;

/// Closed-form least-squares rigid alignment (no scale) of `source` onto
/// `target`: returns (R, t) minimizing Σ‖R·s + t − g‖².
pub fn rigid_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Pose> {
    if source.len() != target.len() || source.len() < 3 {
        return Err(Error::Eval(format!(
            "rigid alignment needs ≥3 paired points, got {}",
            source.len()
        )));
    }
    let n = source.len() as f64;
    let sc: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / n;
    let tc: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - sc) * (t - tc).transpose();
    }
    // R = V diag(1, 1, det(VUᵀ)) Uᵀ from H = UΣVᵀ.
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Eval("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Eval("svd failed".into()))?;
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rotation = v * d * u.transpose();
    let translation = tc - rotation * sc;
    Ok(Pose { rotation, translation })
}

/// Associate two timestamped pose lists by nearest timestamp within
/// [`ASSOCIATION_MAX_GAP`]; each entry is used at most once.
pub fn associate_trajectories<'a>(
    estimated: &'a [(f64, Pose)],
    ground_truth: &'a [(f64, Pose)],
) -> Vec<(&'a Pose, &'a Pose)> {
    let mut pairs = Vec::new();
    let mut j_start = 0usize;
    let mut used_until = 0usize;
    for (t_est, p_est) in estimated {
        let mut best: Option<(f64, usize)> = None;
        for (j, (t_gt, _)) in ground_truth.iter().enumerate().skip(j_start) {
            let gap = (t_gt - t_est).abs();
            if best.map_or(true, |(g, _)| gap < g) {
                best = Some((gap, j));
            }
            if t_gt - t_est > ASSOCIATION_MAX_GAP {
                break;
            }
        }
        if let Some((gap, j)) = best {
            if gap <= ASSOCIATION_MAX_GAP && j >= used_until {
                pairs.push((p_est, &ground_truth[j].1));
                used_until = j + 1;
                j_start = j + 1;
            }
        }
    }
    pairs
}

/// Absolute trajectory error: rigid-align the estimated positions to ground
/// truth, then the RMSE of the translational residuals. Returns centimeters.
pub fn ate_rmse(estimated: &[(f64, Pose)], ground_truth: &[(f64, Pose)]) -> Result<f64> {
    let pairs = associate_trajectories(estimated, ground_truth);
    if pairs.len() < 3 {
        return Err(Error::Eval(format!("only {} associated pose pairs", pairs.len())));
    }
    let est: Vec<Vector3<f64>> = pairs.iter().map(|(e, _)| e.translation).collect();
    let gt: Vec<Vector3<f64>> = pairs.iter().map(|(_, g)| g.translation).collect();
    let align = rigid_align(&est, &gt)?;
    let sum_sq: f64 = est.iter().zip(&gt).map(|(e, g)| (align.apply(*e) - g).norm_squared()).sum();
    Ok(100.0 * (sum_sq / est.len() as f64).sqrt())
}

/// PSNR in dB over [0,1] images; +∞ when the images are identical.
pub fn psnr(a: &Grid<[f64; 3]>, b: &Grid<[f64; 3]>) -> f64 {
    assert!(a.same_size(b), "psnr needs equal resolutions");
    let mut sum_sq = 0.0;
    for (x, y, ca) in a.pixels() {
        let cb = b.at(x, y);
        for c in 0..3 {
            let d = ca[c] - cb[c];
            sum_sq += d * d;
        }
    }
    let mse = sum_sq / (3.0 * (a.width() * a.height()) as f64);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Fraction of valid-depth pixels whose rendered depth exists and lies
/// within `tau` meters of the reference.
pub fn depth_accuracy_ratio(rendered: &Grid<f64>, reference: &Grid<f64>, tau: f64) -> f64 {
    assert!(tau > 0.0);
    assert!(rendered.same_size(reference));
    let mut valid = 0usize;
    let mut accurate = 0usize;
    for (x, y, d) in reference.pixels() {
        if !depth_valid(*d) {
            continue;
        }
        valid += 1;
        let r = rendered.get(x, y);
        if r != DEPTH_NO_HIT && (r - d).abs() < tau {
            accurate += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        accurate as f64 / valid as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::se3_exp;
    use approx::assert_relative_eq;
    use nalgebra::Vector6;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn circle_trajectory(n: usize, radius: f64) -> Vec<(f64, Pose)> {
        (0..n)
            .map(|i| {
                let phi = i as f64 / n as f64 * std::f64::consts::TAU;
                let pose = Pose::new(
                    Matrix3::identity(),
                    Vector3::new(radius * phi.cos(), radius * phi.sin(), 0.0),
                );
                (i as f64 * 0.1, pose)
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_have_zero_ate() {
        let traj = circle_trajectory(50, 1.0);
        assert!(ate_rmse(&traj, &traj).unwrap() < 1e-9);
    }

    #[test]
    fn rigid_offset_is_absorbed_by_alignment() {
        let gt = circle_trajectory(50, 1.0);
        let offset = se3_exp(Vector6::new(0.4, -0.2, 0.7, 0.3, -0.2, 0.5));
        let est: Vec<(f64, Pose)> = gt.iter().map(|(t, p)| (*t, offset.compose(p))).collect();
        assert!(ate_rmse(&est, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn radial_noise_shows_up_as_rmse() {
        let gt = circle_trajectory(400, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let est: Vec<(f64, Pose)> = gt
            .iter()
            .map(|(t, p)| {
                let dir = p.translation.normalize();
                let noise: f64 = if rng.gen_bool(0.5) { 0.01 } else { -0.01 };
                (*t, Pose::new(p.rotation, p.translation + dir * noise))
            })
            .collect();
        let ate = ate_rmse(&est, &gt).unwrap();
        assert!((ate - 1.0).abs() < 0.2, "ate {} cm should be ≈1 cm", ate);
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let traj = circle_trajectory(2, 1.0);
        assert!(ate_rmse(&traj, &traj).is_err());
        // Timestamps too far apart never associate.
        let gt = circle_trajectory(10, 1.0);
        let shifted: Vec<(f64, Pose)> = gt.iter().map(|(t, p)| (t + 0.05, *p)).collect();
        assert!(ate_rmse(&shifted, &gt).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Grid::new(8, 8, [0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a), f64::INFINITY);
        let b = Grid::new(8, 8, [0.6, 0.6, 0.6]);
        // Uniform error 0.1 → MSE 0.01 → 20 dB.
        assert_relative_eq!(psnr(&a, &b), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn depth_ratio_counts_hits_within_tau() {
        let reference = Grid::new(4, 4, 2.0);
        let mut rendered = Grid::new(4, 4, 2.0);
        assert_relative_eq!(depth_accuracy_ratio(&rendered, &reference, 0.01), 1.0);
        rendered.set(0, 0, DEPTH_NO_HIT);
        rendered.set(1, 0, 2.5);
        assert_relative_eq!(depth_accuracy_ratio(&rendered, &reference, 0.01), 14.0 / 16.0);
        let nothing = Grid::new(4, 4, DEPTH_NO_HIT);
        assert_relative_eq!(depth_accuracy_ratio(&nothing, &reference, 0.01), 0.0);
    }
}
