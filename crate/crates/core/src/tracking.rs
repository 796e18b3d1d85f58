//! Frame-to-model camera tracking: multi-level projective point-to-plane ICP
//! against depth/normal maps rendered from the Gaussian map.

use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::preproc::{backproject, downsample_with_payload, FramePyramid};
use crate::render::{render_forward, RenderOptions};
use crate::se3::{se3_exp, Pose};
use crate::types::{CameraIntrinsics, GaussianMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub levels: usize,
    /// Gauss-Newton iterations per level, coarse→fine.
    pub iterations: Vec<usize>,
    /// Correspondence distance gate, meters.
    pub distance_gate: f64,
    /// Correspondence normal-angle gate, degrees.
    pub normal_angle_gate_deg: f64,
    /// Convergence threshold on ‖ξ‖.
    pub convergence_epsilon: f64,
    /// Minimum inliers at the finest level before tracking counts as lost.
    pub min_inliers: usize,
    /// Step halvings allowed when a Gauss-Newton step increases the residual.
    pub max_step_halvings: usize,
    /// Huber scale for the point-to-plane residuals, meters. Downweights the
    /// one-sided tails that freshly optimized surfels leave at creases.
    pub huber_delta: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iterations: vec![10, 5, 4],
            distance_gate: 0.1,
            normal_angle_gate_deg: 30.0,
            convergence_epsilon: 1e-6,
            min_inliers: 100,
            max_step_halvings: 5,
            huber_delta: 0.003,
        }
    }
}

impl IcpConfig {
    fn iterations_at(&self, level: usize) -> usize {
        // `iterations` is listed coarse→fine; level 0 is finest.
        let idx = self.levels.saturating_sub(1 + level);
        self.iterations.get(idx).copied().unwrap_or(5)
    }
}

/// One pyramid level of the model maps: global-frame vertices and normals
/// from the rendered depth/normal buffers.
#[derive(Debug, Clone)]
pub struct ModelLevel {
    pub vertices_global: Grid<Vector3<f64>>,
    pub normals: Grid<Vector3<f64>>,
    pub validity: Grid<bool>,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone)]
pub struct ModelViews {
    pub levels: Vec<ModelLevel>,
    /// Pose the model was rendered at (world-from-camera).
    pub pose: Pose,
}

/// Render the map at the previous pose and convert the resulting depth and
/// normal maps into a model pyramid for projective association.
pub fn render_model_views(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    levels: usize,
) -> ModelViews {
    let buffers = render_forward(map, pose, k, &RenderOptions::default());
    // Sentinel depths (−1) fail depth validity and drop out level by level.
    let mut depth = buffers.depth;
    let mut normals = buffers.normal;

    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        let lk = k.level(level);
        out.push(build_model_level(&depth, &normals, &lk, pose));
        if level + 1 < levels {
            let (d2, n2) = downsample_with_payload(&depth, &normals);
            depth = d2;
            normals = n2;
        }
    }
    ModelViews { levels: out, pose: *pose }
}

/// Build one model level from externally supplied depth/normal maps (the
/// rendered buffers at full resolution, or their downsampled versions).
///
/// Pixels whose ray meets the surfel normal beyond 60° are dropped: the
/// renderer switches to the center-depth approximation there, which is not
/// precise enough to serve as an ICP target.
pub fn build_model_level(
    depth: &Grid<f64>,
    normals: &Grid<Vector3<f64>>,
    k: &CameraIntrinsics,
    pose: &Pose,
) -> ModelLevel {
    const COS_GRAZING: f64 = 0.5; // cos 60°
    let maps = backproject(depth, k).expect("model depth matches level intrinsics");
    let mut vertices_global = Grid::new(k.width, k.height, Vector3::zeros());
    let mut validity = Grid::new(k.width, k.height, false);
    for y in 0..k.height {
        for x in 0..k.width {
            if !maps.validity.get(x, y) {
                continue;
            }
            let n = normals.get(x, y);
            if (n.norm() - 1.0).abs() > 1e-6 {
                continue;
            }
            let ray = pose.rotation * k.ray_dir(x, y);
            if n.dot(&ray).abs() / ray.norm() <= COS_GRAZING {
                continue;
            }
            vertices_global.set(x, y, pose.apply(maps.vertices.get(x, y)));
            validity.set(x, y, true);
        }
    }
    ModelLevel { vertices_global, normals: normals.clone(), validity, intrinsics: *k }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IcpDiagnostics {
    pub inliers: usize,
    pub mean_residual: f64,
    pub iterations_per_level: Vec<usize>,
}

struct NormalEquations {
    a: Matrix6<f64>,
    b: Vector6<f64>,
    count: usize,
    residual_sq: f64,
}

/// One gated correspondence with its frozen Huber weight.
#[derive(Clone, Copy)]
struct Pair {
    v_local: Vector3<f64>,
    model_point: Vector3<f64>,
    model_normal: Vector3<f64>,
    weight: f64,
}

/// Cost of the fixed correspondence set under a candidate pose. Evaluating
/// the line search on the pairs the step was computed from keeps "shedding
/// correspondences" from masquerading as progress.
fn fixed_pair_cost(pairs: &[Pair], pose: &Pose) -> f64 {
    pairs
        .par_chunks(4096)
        .map(|chunk| {
            let mut acc = 0.0;
            for p in chunk {
                let r = (pose.apply(p.v_local) - p.model_point).dot(&p.model_normal);
                acc += p.weight * r * r;
            }
            acc
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum()
}

/// Accumulate point-to-plane normal equations for one level under `pose`.
/// Row-parallel with an ordered fold, so results are bit-deterministic.
fn accumulate(
    current: &crate::preproc::PyramidLevel,
    model: &ModelLevel,
    model_cam_inv: &Pose,
    pose: &Pose,
    cos_gate: f64,
    dist_gate: f64,
    huber_delta: f64,
    collect_pairs: bool,
) -> (NormalEquations, Vec<Pair>) {
    let w = current.maps.width();
    let h = current.maps.height();
    let rows: Vec<(Matrix6<f64>, Vector6<f64>, usize, f64, Vec<Pair>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut a = Matrix6::zeros();
            let mut b = Vector6::zeros();
            let mut count = 0usize;
            let mut res_sq = 0.0;
            let mut pairs = Vec::new();
            for x in 0..w {
                if !current.maps.validity.get(x, y) {
                    continue;
                }
                let v_l = current.maps.vertices.get(x, y);
                let v_g = pose.apply(v_l);
                let model_cam = model_cam_inv.apply(v_g);
                if model_cam.z <= 0.0 {
                    continue;
                }
                let (u, v) = model.intrinsics.project(model_cam);
                if u < 0.0 || v < 0.0 {
                    continue;
                }
                let (ux, uy) = (u as usize, v as usize);
                if ux >= model.intrinsics.width || uy >= model.intrinsics.height {
                    continue;
                }
                if !model.validity.get(ux, uy) {
                    continue;
                }
                let m_v = model.vertices_global.get(ux, uy);
                if (v_g - m_v).norm() > dist_gate {
                    continue;
                }
                let m_n = model.normals.get(ux, uy);
                let n_g = pose.rotate(current.maps.normals.get(x, y));
                if n_g.dot(&m_n) < cos_gate {
                    continue;
                }
                // r = (v − m)·n; for a left increment v' ≈ v + ρ + φ×v the
                // Jacobian is [nᵀ, (v×n)ᵀ].
                let r = (v_g - m_v).dot(&m_n);
                let jt = Vector6::new(
                    m_n.x,
                    m_n.y,
                    m_n.z,
                    v_g.y * m_n.z - v_g.z * m_n.y,
                    v_g.z * m_n.x - v_g.x * m_n.z,
                    v_g.x * m_n.y - v_g.y * m_n.x,
                );
                let w = if r.abs() > huber_delta { huber_delta / r.abs() } else { 1.0 };
                a += w * jt * jt.transpose();
                b += -jt * (w * r);
                count += 1;
                res_sq += w * r * r;
                if collect_pairs {
                    pairs.push(Pair { v_local: v_l, model_point: m_v, model_normal: m_n, weight: w });
                }
            }
            (a, b, count, res_sq, pairs)
        })
        .collect();
    let mut out =
        NormalEquations { a: Matrix6::zeros(), b: Vector6::zeros(), count: 0, residual_sq: 0.0 };
    let mut all_pairs = Vec::new();
    for (a, b, c, r, pairs) in rows {
        out.a += a;
        out.b += b;
        out.count += c;
        out.residual_sq += r;
        all_pairs.extend(pairs);
    }
    (out, all_pairs)
}

/// Solve the normal equations in the well-conditioned subspace: eigen
/// directions with eigenvalues below 1e-9 of the largest carry no signal
/// (under-constrained views) and are dropped instead of amplified.
fn solve_truncated(a: &Matrix6<f64>, b: &Vector6<f64>) -> Option<Vector6<f64>> {
    let eig = a.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if max_ev <= 0.0 || !max_ev.is_finite() {
        return None;
    }
    let mut xi = Vector6::zeros();
    let mut usable = 0;
    for i in 0..6 {
        let ev = eig.eigenvalues[i];
        if ev > 1e-9 * max_ev {
            let v = eig.eigenvectors.column(i);
            xi += v * (v.dot(b) / ev);
            usable += 1;
        }
    }
    (usable > 0).then_some(xi)
}

/// Multi-level projective point-to-plane ICP against the rendered model.
///
/// Minimizes Σ‖(T·V(u) − V̂ᵍ(û))·N̂(û)‖² by Gauss-Newton over ξ with
/// step-halving on residual increase. Fails with [`Error::TrackingLost`]
/// when fewer than `min_inliers` correspondences survive at the finest
/// level; the caller keeps the previous pose and flags the frame.
pub fn icp_track(
    current: &FramePyramid,
    model: &ModelViews,
    init_pose: &Pose,
    cfg: &IcpConfig,
) -> Result<(Pose, IcpDiagnostics)> {
    let cos_gate = cfg.normal_angle_gate_deg.to_radians().cos();
    let model_cam_inv = model.pose.inverse();
    let mut pose = *init_pose;
    let mut diag = IcpDiagnostics::default();

    let levels = cfg.levels.min(current.levels.len()).min(model.levels.len());
    for level in (0..levels).rev() {
        let cur = &current.levels[level];
        let mdl = &model.levels[level];
        let mut used = 0;
        for _ in 0..cfg.iterations_at(level) {
            let (eq, pairs) = accumulate(
                cur,
                mdl,
                &model_cam_inv,
                &pose,
                cos_gate,
                cfg.distance_gate,
                cfg.huber_delta,
                true,
            );
            if eq.count < 6 {
                break;
            }
            let Some(mut xi) = solve_truncated(&eq.a, &eq.b) else { break };
            used += 1;

            // Line search on the fixed correspondence set: a step is accepted
            // only if it strictly reduces the cost of the pairs it was solved
            // from. Plateau directions (under-constrained views) leave those
            // residuals unchanged and are rejected instead of slid along.
            let mut accepted = None;
            for _ in 0..=cfg.max_step_halvings {
                let mut candidate = se3_exp(xi).compose(&pose);
                candidate.renormalize_rotation();
                if fixed_pair_cost(&pairs, &candidate) < eq.residual_sq {
                    accepted = Some(candidate);
                    break;
                }
                xi *= 0.5;
            }
            let Some(next) = accepted else { break };
            pose = next;
            if xi.norm() < cfg.convergence_epsilon {
                break;
            }
        }
        diag.iterations_per_level.push(used);
    }

    let (finest, _) = accumulate(
        &current.levels[0],
        &model.levels[0],
        &model_cam_inv,
        &pose,
        cos_gate,
        cfg.distance_gate,
        cfg.huber_delta,
        false,
    );
    diag.inliers = finest.count;
    diag.mean_residual = if finest.count > 0 {
        (finest.residual_sq / finest.count as f64).sqrt()
    } else {
        f64::INFINITY
    };
    if finest.count < cfg.min_inliers {
        return Err(Error::TrackingLost { inliers: finest.count, min: cfg.min_inliers });
    }
    Ok((pose, diag))
}

/// Temporary instrumented single-level tracker for debugging probes.
#[doc(hidden)]
pub fn icp_trace(
    current: &crate::preproc::PyramidLevel,
    model: &ModelLevel,
    model_pose: &Pose,
    init_pose: &Pose,
    cfg: &IcpConfig,
    iterations: usize,
) -> Pose {
    let cos_gate = cfg.normal_angle_gate_deg.to_radians().cos();
    let inv = model_pose.inverse();
    let mut pose = *init_pose;
    for it in 0..iterations {
        let (eq, pairs) =
            accumulate(current, model, &inv, &pose, cos_gate, cfg.distance_gate, cfg.huber_delta, true);
        let Some(mut xi) = solve_truncated(&eq.a, &eq.b) else {
            eprintln!("  it{it}: singular");
            break;
        };
        eprintln!(
            "  it{it}: count {} res {:.3e} |xi| {:.3e} xi {:?}",
            eq.count,
            (eq.residual_sq / eq.count as f64).sqrt(),
            xi.norm(),
            xi.iter().map(|v| format!("{v:+.4}")).collect::<Vec<_>>()
        );
        let mut accepted = None;
        for h in 0..=cfg.max_step_halvings {
            let mut candidate = se3_exp(xi).compose(&pose);
            candidate.renormalize_rotation();
            if fixed_pair_cost(&pairs, &candidate) < eq.residual_sq {
                accepted = Some((candidate, h));
                break;
            }
            xi *= 0.5;
        }
        match accepted {
            Some((next, h)) => {
                eprintln!("    accepted after {h} halvings");
                pose = next;
            }
            None => {
                eprintln!("    rejected, stop");
                break;
            }
        }
    }
    pose
}

#[cfg(test)]
mod tests;
