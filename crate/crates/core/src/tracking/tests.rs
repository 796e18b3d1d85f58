use approx::assert_relative_eq;
use nalgebra::{Vector3, Vector6};

use super::*;
use crate::math::quat_identity;
use crate::preproc::{build_pyramid, compute_normals};
use crate::types::Gaussian;

fn camera(w: usize, h: usize, f: f64) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: w as f64 / 2.0 + 0.5,
        cy: h as f64 / 2.0 + 0.5,
        width: w,
        height: h,
        depth_scale: 1000.0,
    }
}

/// Analytic depth of a three-plane corner (x = 1, y = 1, z = 2) seen from
/// `pose`: nearest positive ray/plane intersection. Constrains all six
/// degrees of freedom.
fn corner_depth(k: &CameraIntrinsics, pose: &Pose) -> Grid<f64> {
    let mut depth = Grid::new(k.width, k.height, 0.0);
    for y in 0..k.height {
        for x in 0..k.width {
            let dir = pose.rotation * k.ray_dir(x, y);
            let origin = pose.translation;
            let mut best = f64::INFINITY;
            // Plane x = 1 with the corner at (1, 1, 2): visible for x ≥ ...
            for (axis, offset) in [(0usize, 1.0f64), (1, 1.0), (2, 2.0)] {
                if dir[axis].abs() < 1e-12 {
                    continue;
                }
                let theta = (offset - origin[axis]) / dir[axis];
                if theta <= 0.0 {
                    continue;
                }
                let p = origin + dir * theta;
                // Keep the corner region only (inside the octant).
                if p.x <= 1.0 + 1e-9 && p.y <= 1.0 + 1e-9 && p.z <= 2.0 + 1e-9 {
                    best = best.min(theta);
                }
            }
            if best.is_finite() {
                // θ along an unnormalized ray with unit z-component equals
                // the camera-frame depth.
                depth.set(x, y, best);
            }
        }
    }
    depth
}

fn model_from_depth(k: &CameraIntrinsics, pose: &Pose, depth: &Grid<f64>, levels: usize) -> ModelViews {
    // Build normals in the camera frame, rotate to world, then assemble
    // per-level model maps the same way render_model_views does.
    let mut d = depth.clone();
    let mut out = Vec::new();
    for level in 0..levels {
        let lk = k.level(level);
        let mut maps = backproject(&d, &lk).unwrap();
        compute_normals(&mut maps);
        let world_normals = maps.normals.map(|n| pose.rotation * n);
        let mut lvl = build_model_level(&d, &world_normals, &lk, pose);
        // Restrict validity to pixels with computed normals.
        for y in 0..lk.height {
            for x in 0..lk.width {
                if !maps.validity.get(x, y) {
                    lvl.validity.set(x, y, false);
                }
            }
        }
        out.push(lvl);
        if level + 1 < levels {
            let (d2, _) = downsample_with_payload(&d, &d);
            d = d2;
        }
    }
    ModelViews { levels: out, pose: *pose }
}

fn pyramid_for(k: &CameraIntrinsics, pose: &Pose, levels: usize) -> FramePyramid {
    build_pyramid(&corner_depth(k, pose), k, levels).unwrap()
}

#[test]
fn identity_alignment_converges_immediately() {
    let k = camera(160, 160, 120.0);
    let pose = Pose::identity();
    let depth = corner_depth(&k, &pose);
    let model = model_from_depth(&k, &pose, &depth, 3);
    let current = pyramid_for(&k, &pose, 3);
    let cfg = IcpConfig::default();
    let (recovered, diag) = icp_track(&current, &model, &pose, &cfg).unwrap();
    assert!(diag.inliers >= cfg.min_inliers);
    assert!(diag.mean_residual < 1e-9, "residual {}", diag.mean_residual);
    assert!((recovered.translation - pose.translation).norm() < 1e-9);
}

#[test]
fn recovers_small_translation() {
    let k = camera(160, 160, 120.0);
    // Ground truth: identity. Previous pose (model view + init): 5 mm off.
    let truth = Pose::identity();
    let prev = se3_exp(Vector6::new(0.005, 0.0, 0.0, 0.0, 0.0, 0.0));
    let model = model_from_depth(&k, &prev, &corner_depth(&k, &prev), 3);
    let current = pyramid_for(&k, &truth, 3);
    let (recovered, _) = icp_track(&current, &model, &prev, &IcpConfig::default()).unwrap();
    let t_err = (recovered.translation - truth.translation).norm();
    let r_err = recovered.rotation_angle_to(&truth).to_degrees();
    assert!(t_err < 5e-4, "translation error {} m", t_err);
    assert!(r_err < 0.05, "rotation error {}°", r_err);
}

#[test]
fn recovers_mixed_perturbation_within_tolerance() {
    let k = camera(160, 160, 120.0);
    let truth = Pose::identity();
    // 2 cm + 2° mixed perturbation.
    let angle = 2f64.to_radians();
    let prev = se3_exp(Vector6::new(0.012, -0.012, 0.008, angle * 0.6, -angle * 0.5, angle * 0.6));
    let model = model_from_depth(&k, &prev, &corner_depth(&k, &prev), 3);
    let current = pyramid_for(&k, &truth, 3);
    let (recovered, diag) = icp_track(&current, &model, &prev, &IcpConfig::default()).unwrap();
    let t_err = (recovered.translation - truth.translation).norm();
    let r_err = recovered.rotation_angle_to(&truth).to_degrees();
    assert!(t_err < 1e-3, "translation error {} m (diag {:?})", t_err, diag);
    assert!(r_err < 0.1, "rotation error {}°", r_err);
}

#[test]
fn true_pose_residual_is_negligible_on_clean_data() {
    let k = camera(160, 160, 120.0);
    let pose = se3_exp(Vector6::new(0.1, -0.05, 0.02, 0.05, 0.02, -0.04));
    let model = model_from_depth(&k, &pose, &corner_depth(&k, &pose), 1);
    let current = pyramid_for(&k, &pose, 1);
    let cfg = IcpConfig { levels: 1, iterations: vec![1], ..Default::default() };
    let (_, diag) = icp_track(&current, &model, &pose, &cfg).unwrap();
    assert!(diag.mean_residual < 1e-6, "residual {}", diag.mean_residual);
}

#[test]
fn empty_model_reports_tracking_lost() {
    let k = camera(64, 64, 80.0);
    let map = GaussianMap::new(2);
    let model = render_model_views(&map, &Pose::identity(), &k, 3);
    let current = pyramid_for(&k, &Pose::identity(), 3);
    let err = icp_track(&current, &model, &Pose::identity(), &IcpConfig::default());
    assert!(matches!(err, Err(Error::TrackingLost { .. })));
}

#[test]
fn model_views_from_disc_map_lie_on_the_surface() {
    // Fronto-parallel disc at z = 2: rendered model vertices must sit on the
    // plane z = 2 wherever valid.
    let k = camera(64, 64, 200.0);
    let mut map = GaussianMap::new(2);
    map.insert(Gaussian::new_opaque(
        Vector3::new(0.0, 0.0, 2.0),
        Vector3::new(0.5, 0.5, 0.05),
        quat_identity(),
        [0.5; 3],
        2,
        0,
    ));
    let model = render_model_views(&map, &Pose::identity(), &k, 3);
    let finest = &model.levels[0];
    let mut checked = 0;
    for y in 0..finest.intrinsics.height {
        for x in 0..finest.intrinsics.width {
            if finest.validity.get(x, y) {
                assert_relative_eq!(finest.vertices_global.get(x, y).z, 2.0, epsilon = 1e-5);
                checked += 1;
            }
        }
    }
    assert!(checked > 50, "expected valid model pixels, got {checked}");
}

