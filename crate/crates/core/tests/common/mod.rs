//! Shared test utilities: random scenes, an independent per-ray depth
//! oracle, and finite-difference gradient checking.

#![allow(dead_code)]

use nalgebra::{Vector3, Vector4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatrec_core::grid::Grid;
use splatrec_core::loss::{compute_loss, compute_loss_and_grads, LossWeights};
use splatrec_core::math::quat_normalize;
use splatrec_core::render::{project_gaussian, RenderOptions, F_MAX, F_MIN};
use splatrec_core::se3::Pose;
use splatrec_core::types::{
    CameraIntrinsics, Gaussian, GaussianId, GaussianKind, GaussianMap, RgbdFrame, DEPTH_NO_HIT,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera(width: usize, height: usize, f: f64) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0 + 0.5,
        cy: height as f64 / 2.0 + 0.5,
        width,
        height,
        depth_scale: 1000.0,
    }
}

pub fn random_unit_quat(rng: &mut ChaCha8Rng) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if q.norm() > 0.1 {
            return quat_normalize(q);
        }
    }
}

/// Random mixed-kind scene inside the camera frustum.
pub fn random_scene(
    rng: &mut ChaCha8Rng,
    k: &CameraIntrinsics,
    count: usize,
    transparent_fraction: f64,
    sh_degree: usize,
) -> GaussianMap {
    let mut map = GaussianMap::new(sh_degree);
    for _ in 0..count {
        let z = rng.gen_range(0.8..3.0);
        let span_x = 0.4 * z * k.width as f64 / k.fx;
        let span_y = 0.4 * z * k.height as f64 / k.fy;
        let position = Vector3::new(
            rng.gen_range(-span_x..span_x),
            rng.gen_range(-span_y..span_y),
            z,
        );
        let color = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let rotation = random_unit_quat(rng);
        if rng.gen_bool(transparent_fraction) {
            let s1 = rng.gen_range(0.004..0.02);
            let mut g = Gaussian::new_transparent(
                position,
                Vector3::new(s1, s1, 0.1 * s1),
                rotation,
                color,
                sh_degree,
                0,
            );
            perturb_sh(rng, &mut g);
            map.insert(g);
        } else {
            let s1 = rng.gen_range(0.02..0.15);
            let mut g = Gaussian::new_opaque(
                position,
                Vector3::new(s1, s1, 0.1 * s1),
                rotation,
                color,
                sh_degree,
                0,
            );
            perturb_sh(rng, &mut g);
            map.insert(g);
        }
    }
    map
}

fn perturb_sh(rng: &mut ChaCha8Rng, g: &mut Gaussian) {
    for coeff in g.sh.iter_mut().skip(1) {
        for c in coeff.iter_mut() {
            *c = rng.gen_range(-0.05..0.05);
        }
    }
}

/// Random target frame; roughly 10% of depth pixels invalid.
pub fn random_frame(rng: &mut ChaCha8Rng, k: &CameraIntrinsics) -> RgbdFrame {
    let mut color = Grid::new(k.width, k.height, [0.0; 3]);
    let mut depth = Grid::new(k.width, k.height, 0.0);
    for y in 0..k.height {
        for x in 0..k.width {
            color.set(
                x,
                y,
                [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            );
            let d = if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.5..4.0) };
            depth.set(x, y, d);
        }
    }
    RgbdFrame { color, depth, frame_index: 0, timestamp: 0.0 }
}

/// Independent per-ray depth oracle: for every pixel, walk ALL Gaussians
/// sorted along the ray and apply the disc-intersection depth definition
/// directly (no tiles, no early termination).
pub fn oracle_depth(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    options: &RenderOptions,
) -> Grid<f64> {
    let sh_degree = map.sh_degree();
    let mut projected: Vec<_> = map
        .iter_live()
        .filter_map(|(slot, g)| {
            project_gaussian(g, GaussianId { slot, generation: 0 }, pose, k, sh_degree)
                .map(|p| (slot, g.clone(), p))
        })
        .collect();
    projected.sort_by(|a, b| {
        a.2.view_depth.partial_cmp(&b.2.view_depth).unwrap().then(a.0.cmp(&b.0))
    });

    let cam_inv = pose.inverse();
    let cos_limit = options.normal_angle_limit_deg.to_radians().cos();
    let mut out = Grid::new(k.width, k.height, DEPTH_NO_HIT);
    for y in 0..k.height {
        for x in 0..k.width {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            for (_, g, p) in &projected {
                if g.kind != GaussianKind::Opaque {
                    continue;
                }
                if px < p.aabb_min.x || px > p.aabb_max.x || py < p.aabb_min.y || py > p.aabb_max.y
                {
                    continue;
                }
                let dx = px - p.mean2d.x;
                let dy = py - p.mean2d.y;
                let q = p.conic[(0, 0)] * dx * dx
                    + (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx * dy
                    + p.conic[(1, 1)] * dy * dy;
                if q < 0.0 {
                    continue;
                }
                let f = (g.opacity * (-0.5 * q).exp()).min(F_MAX);
                if f < F_MIN || f <= options.alpha_hit_threshold {
                    continue;
                }
                // First sufficiently dense opaque Gaussian: apply the depth
                // definition directly.
                let dir_world = pose.rotation * k.ray_dir(x, y);
                let normal = splatrec_core::math::rotated_min_axis(g.scale, g.rotation);
                let denom = dir_world.dot(&normal);
                let cos_angle = denom.abs() / dir_world.norm();
                let depth = if cos_angle > cos_limit {
                    (g.position - pose.translation).dot(&normal) / denom
                } else {
                    cam_inv.apply(g.position).z
                };
                out.set(x, y, depth);
                break;
            }
        }
    }
    out
}

pub struct GradCheckStats {
    pub checked: usize,
    pub failed: usize,
    pub worst_rel: f64,
}

/// Central finite differences of the total loss against the analytic
/// gradients, over every parameter coordinate of every Gaussian.
pub fn gradient_check(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    options: &RenderOptions,
    frame: &RgbdFrame,
    weights: &LossWeights,
    step: f64,
    grad_floor: f64,
    rel_tol: f64,
) -> GradCheckStats {
    let (_, grads, _) = compute_loss_and_grads(map, pose, k, options, frame, weights);
    let mut stats = GradCheckStats { checked: 0, failed: 0, worst_rel: 0.0 };

    let eval = |m: &GaussianMap| compute_loss(m, pose, k, options, frame, weights).0.total;

    let verbose = std::env::var("GRADCHECK_VERBOSE").is_ok();
    let slots: Vec<u32> = map.iter_live().map(|(s, _)| s).collect();
    for &slot in &slots {
        let s = slot as usize;
        let mut check = |label: &str, analytic: f64, apply: &dyn Fn(&mut Gaussian, f64)| {
            if analytic.abs() <= grad_floor {
                return;
            }
            let mut plus = map.clone();
            apply(plus.get_slot_mut(slot).unwrap(), step);
            let mut minus = map.clone();
            apply(minus.get_slot_mut(slot).unwrap(), -step);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
            stats.checked += 1;
            if rel > rel_tol {
                stats.failed += 1;
                if verbose {
                    eprintln!(
                        "gradcheck fail slot {slot} {label}: analytic {analytic:.6e} fd {fd:.6e} rel {rel:.3e}"
                    );
                }
            }
            if rel > stats.worst_rel {
                stats.worst_rel = rel;
            }
        };

        for i in 0..3 {
            check("position", grads.position[s][i], &move |g, h| g.position[i] += h);
            check("scale", grads.scale[s][i], &move |g, h| g.scale[i] += h);
        }
        for i in 0..4 {
            check("rotation", grads.rotation[s][i], &move |g, h| g.rotation[i] += h);
        }
        let n_coeffs = map.get_slot(slot).unwrap().sh.len();
        for ci in 0..n_coeffs {
            for ch in 0..3 {
                check("sh", grads.sh[s][ci][ch], &move |g, h| g.sh[ci][ch] += h);
            }
        }
    }
    stats
}
