//! Analytic backward pass of the rasterizer.
//!
//! Given per-pixel loss cotangents dL/dĈ and dL/dD̂, produces per-Gaussian
//! gradients for position, scale, rotation and SH coefficients (the opacity
//! gradient is computed as well; its learning rate is fixed to zero).
//!
//! The color path chains through the blending weights into the 2D mean and
//! covariance, then through the EWA projection (including the Jacobian's own
//! dependence on the camera-frame point) into world parameters. The depth
//! path differentiates the ray/disc intersection w.r.t. the hit Gaussian's
//! position and normal only; the discrete hit selection and the 60° branch
//! switch carry no gradient.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use std::collections::HashMap;

use crate::error::Result;
use crate::grid::Grid;
use crate::math;
use crate::se3::Pose;
use crate::sh;
use crate::types::{CameraIntrinsics, GaussianMap, GaussianState, RenderBuffers};

use super::{
    check_version, prepare, walk_pixel, DepthMode, FramePrep, ProjectedGaussian, RenderOptions,
    TILE_SIZE,
};

/// Dense per-slot parameter gradients.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub position: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
    pub sh: Vec<Vec<[f64; 3]>>,
    pub opacity: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(map: &GaussianMap) -> Self {
        let n = map.slot_count();
        let coeffs = sh::coeff_count(map.sh_degree());
        Self {
            position: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![Vector4::zeros(); n],
            sh: vec![vec![[0.0; 3]; coeffs]; n],
            opacity: vec![0.0; n],
        }
    }

    pub fn sh_nonzero(&self, slot: u32) -> bool {
        self.sh[slot as usize].iter().any(|c| c.iter().any(|v| *v != 0.0))
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for i in 0..self.position.len() {
            self.position[i] += other.position[i];
            self.scale[i] += other.scale[i];
            self.rotation[i] += other.rotation[i];
            self.opacity[i] += other.opacity[i];
            for (a, b) in self.sh[i].iter_mut().zip(&other.sh[i]) {
                for c in 0..3 {
                    a[c] += b[c];
                }
            }
        }
    }
}

/// Per-projection accumulator filled by the pixel loops.
#[derive(Clone)]
struct ProjAccum {
    d_mean: Vector2<f64>,
    d_cov: Matrix2<f64>,
    d_color: [f64; 3],
    d_alpha: f64,
    d_pos_world: Vector3<f64>,
    d_normal_world: Vector3<f64>,
    d_cam_z: f64,
}

impl ProjAccum {
    fn zero() -> Self {
        Self {
            d_mean: Vector2::zeros(),
            d_cov: Matrix2::zeros(),
            d_color: [0.0; 3],
            d_alpha: 0.0,
            d_pos_world: Vector3::zeros(),
            d_normal_world: Vector3::zeros(),
            d_cam_z: 0.0,
        }
    }

    fn add(&mut self, other: &ProjAccum) {
        self.d_mean += other.d_mean;
        self.d_cov += other.d_cov;
        for c in 0..3 {
            self.d_color[c] += other.d_color[c];
        }
        self.d_alpha += other.d_alpha;
        self.d_pos_world += other.d_pos_world;
        self.d_normal_world += other.d_normal_world;
        self.d_cam_z += other.d_cam_z;
    }
}

/// Backward pass. `buffers` must come from a forward render of the exact
/// same map state and options; a mutated map is rejected as stale.
pub fn render_backward(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    options: &RenderOptions,
    buffers: &RenderBuffers,
    d_color: &Grid<[f64; 3]>,
    d_depth: &Grid<f64>,
) -> Result<ParamGrads> {
    check_version(map, buffers)?;
    let prep = prepare(map, pose, k, options);
    Ok(render_backward_prepared(map, k, options, &prep, d_color, d_depth))
}

pub(crate) fn render_backward_prepared(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    options: &RenderOptions,
    prep: &FramePrep,
    d_color: &Grid<[f64; 3]>,
    d_depth: &Grid<f64>,
) -> ParamGrads {
    let alpha_mode = options.depth_mode == DepthMode::AlphaBlend;

    // Phase 1: per-tile sparse accumulation, folded in tile order so the
    // result does not depend on the worker count.
    let tile_partials: Vec<Vec<(u32, ProjAccum)>> = (0..prep.bins.lists.len())
        .into_par_iter()
        .map(|tile_idx| {
            accumulate_tile(tile_idx, prep, k, options, alpha_mode, d_color, d_depth)
        })
        .collect();

    let mut accums: Vec<ProjAccum> = vec![ProjAccum::zero(); prep.projections.len()];
    let mut touched = vec![false; prep.projections.len()];
    for partial in tile_partials {
        for (pi, acc) in partial {
            accums[pi as usize].add(&acc);
            touched[pi as usize] = true;
        }
    }

    // Phase 2: chain per-projection accumulators into parameter gradients.
    let finalized: Vec<Option<(u32, FinalGrad)>> = (0..prep.projections.len())
        .into_par_iter()
        .map(|i| {
            if !touched[i] {
                return None;
            }
            let p = &prep.projections[i];
            if options.grad_unstable_only && p.state != GaussianState::Unstable {
                return None;
            }
            Some((p.source_index, finalize(p, &accums[i], map, prep, k)))
        })
        .collect();

    let mut grads = ParamGrads::zeros(map);
    for item in finalized.into_iter().flatten() {
        let (slot, fg) = item;
        let s = slot as usize;
        grads.position[s] += fg.position;
        grads.scale[s] += fg.scale;
        grads.rotation[s] += fg.rotation;
        grads.opacity[s] += fg.opacity;
        for (dst, src) in grads.sh[s].iter_mut().zip(&fg.sh) {
            for c in 0..3 {
                dst[c] += src[c];
            }
        }
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn accumulate_tile(
    tile_idx: usize,
    prep: &FramePrep,
    k: &CameraIntrinsics,
    options: &RenderOptions,
    alpha_mode: bool,
    d_color: &Grid<[f64; 3]>,
    d_depth: &Grid<f64>,
) -> Vec<(u32, ProjAccum)> {
    let tx = tile_idx % prep.bins.tiles_x;
    let ty = tile_idx / prep.bins.tiles_x;
    if !prep.tile_active.get(tx, ty) {
        return Vec::new();
    }
    let list = &prep.bins.lists[tile_idx];
    if list.is_empty() {
        return Vec::new();
    }
    let x1 = ((tx + 1) * TILE_SIZE).min(k.width);
    let y1 = ((ty + 1) * TILE_SIZE).min(k.height);

    let mut partials: Vec<(u32, ProjAccum)> = Vec::new();
    let mut index_of: HashMap<u32, usize> = HashMap::new();
    let mut contribs: Vec<(u32, f64, f64)> = Vec::new();

    for y in ty * TILE_SIZE..y1 {
        for x in tx * TILE_SIZE..x1 {
            if let Some(mask) = &options.active_pixel_mask {
                if !mask.get(x, y) {
                    continue;
                }
            }
            let dc = *d_color.at(x, y);
            let dd = d_depth.get(x, y);
            if dc == [0.0; 3] && dd == 0.0 {
                continue;
            }
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            contribs.clear();
            let (_, hit) = walk_pixel(
                &prep.projections,
                list,
                px,
                py,
                options.alpha_hit_threshold,
                alpha_mode,
                |pi, f, t_before| contribs.push((pi, f, t_before)),
            );

            let entry = |partials: &mut Vec<(u32, ProjAccum)>,
                             index_of: &mut HashMap<u32, usize>,
                             pi: u32|
             -> usize {
                *index_of.entry(pi).or_insert_with(|| {
                    partials.push((pi, ProjAccum::zero()));
                    partials.len() - 1
                })
            };

            // Blending backward, back to front. The suffix accumulators hold
            // Σ_{j>i} payload_j f_j T_j per channel.
            let mut suffix = [0.0f64; 4];
            for &(pi, f, t_before) in contribs.iter().rev() {
                let p = &prep.projections[pi as usize];
                let mut d_f = 0.0;
                let mut payload = [p.color_eval[0], p.color_eval[1], p.color_eval[2], 0.0];
                let mut cotangent = [dc[0], dc[1], dc[2], 0.0];
                if alpha_mode {
                    payload[3] = p.cam_point.z;
                    cotangent[3] = dd;
                }
                let slot_idx = entry(&mut partials, &mut index_of, pi);
                let acc = &mut partials[slot_idx].1;
                for c in 0..4 {
                    if cotangent[c] == 0.0 {
                        continue;
                    }
                    d_f += cotangent[c] * (payload[c] * t_before - suffix[c] / (1.0 - f));
                    let d_payload = cotangent[c] * f * t_before;
                    if c < 3 {
                        acc.d_color[c] += d_payload;
                    } else {
                        acc.d_cam_z += d_payload;
                    }
                }
                for c in 0..4 {
                    suffix[c] += payload[c] * f * t_before;
                }

                // f = α·exp(−q/2): distribute d_f into α, mean and conic.
                let g_val = f / p.opacity;
                acc.d_alpha += g_val * d_f;
                let d_q = -0.5 * f * d_f;
                let delta = Vector2::new(px - p.mean2d.x, py - p.mean2d.y);
                let conic_delta = p.conic * delta;
                // dq/dδ = 2Λδ and δ = u − μ, so dμ = −2·dq·Λδ.
                acc.d_mean += conic_delta * (-2.0 * d_q);
                let d_conic = d_q * delta * delta.transpose();
                // dΣ = −Λ dΛ Λ for the symmetric inverse.
                acc.d_cov += -(p.conic * d_conic * p.conic);
            }

            // Depth path (disc mode): gradient flows only into the hit.
            if !alpha_mode && dd != 0.0 {
                if let Some((pi, _)) = hit {
                    let p = &prep.projections[pi as usize];
                    let slot_idx = entry(&mut partials, &mut index_of, pi);
                    let acc = &mut partials[slot_idx].1;
                    let dir_world = prep.cam.rot_wc * k.ray_dir(x, y);
                    let denom = dir_world.dot(&p.normal);
                    let cos_angle = denom.abs() / dir_world.norm();
                    if cos_angle > prep.cos_angle_limit {
                        let to_gauss = p.position - prep.cam.cam_pos;
                        let theta = to_gauss.dot(&p.normal) / denom;
                        acc.d_pos_world += dd * p.normal / denom;
                        acc.d_normal_world += dd * (to_gauss - theta * dir_world) / denom;
                    } else {
                        acc.d_cam_z += dd;
                    }
                }
            }
        }
    }
    partials
}

struct FinalGrad {
    position: Vector3<f64>,
    scale: Vector3<f64>,
    rotation: Vector4<f64>,
    sh: Vec<[f64; 3]>,
    opacity: f64,
}

/// Chain a projection's pixel-space accumulators into world parameters.
fn finalize(
    p: &ProjectedGaussian,
    acc: &ProjAccum,
    map: &GaussianMap,
    prep: &FramePrep,
    k: &CameraIntrinsics,
) -> FinalGrad {
    let g = map.get_slot(p.source_index).expect("projection references live slot");
    let coeff_used = sh::coeff_count(prep.sh_degree);
    let mut sh_grad = vec![[0.0; 3]; g.sh.len()];

    // SH coefficients and the view-direction term.
    let (basis, basis_grad, nb) = sh::basis_and_grad(prep.sh_degree, p.view_dir);
    let nb = nb.min(coeff_used).min(g.sh.len());
    let mut d_dir = Vector3::zeros();
    for i in 0..nb {
        let mut along = 0.0;
        for c in 0..3 {
            sh_grad[i][c] = basis[i] * acc.d_color[c];
            along += g.sh[i][c] * acc.d_color[c];
        }
        d_dir += along * basis_grad[i];
    }
    // dir = (p − cam)/dist: project out the radial component.
    let d_pos_sh = (d_dir - p.view_dir * p.view_dir.dot(&d_dir)) / p.view_dist;

    // Covariance chain: Σ2D = J Σ_cam Jᵀ + reg.
    let g2 = 0.5 * (acc.d_cov + acc.d_cov.transpose());
    let d_sigma_cam = p.jacobian.transpose() * g2 * p.jacobian;
    let d_sigma = prep.cam.rot_cw.transpose() * d_sigma_cam * prep.cam.rot_cw;

    let q_unit = math::quat_normalize(g.rotation);
    let rot = math::quat_to_matrix(q_unit);
    let m = rot.transpose() * d_sigma * rot;
    let scale_grad = Vector3::new(
        2.0 * g.scale.x * m[(0, 0)],
        2.0 * g.scale.y * m[(1, 1)],
        2.0 * g.scale.z * m[(2, 2)],
    );
    let d_diag = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let mut d_rot = 2.0 * d_sigma * rot * d_diag;

    // Normal chain from depth hits: n = R e_axis.
    if acc.d_normal_world != Vector3::zeros() {
        let axis = math::min_scale_axis(g.scale);
        let mut e = Vector3::zeros();
        e[axis] = 1.0;
        d_rot += acc.d_normal_world * e.transpose();
    }
    let rotation_grad = math::quat_grad_from_matrix_grad(g.rotation, &d_rot);

    // Mean and Jacobian paths into the camera-frame point.
    let mut d_cam = p.jacobian.transpose() * acc.d_mean;
    d_cam.z += acc.d_cam_z;
    {
        // dL/dJ = 2 G2 J Σ_cam; J itself depends on the camera point.
        let d_j = 2.0 * g2 * p.jacobian * p.cov_cam;
        let (x, y, z) = (p.cam_point.x, p.cam_point.y, p.cam_point.z);
        let z2 = z * z;
        let z3 = z2 * z;
        d_cam.x += d_j[(0, 2)] * (-k.fx / z2);
        d_cam.y += d_j[(1, 2)] * (-k.fy / z2);
        d_cam.z += d_j[(0, 0)] * (-k.fx / z2)
            + d_j[(1, 1)] * (-k.fy / z2)
            + d_j[(0, 2)] * (2.0 * k.fx * x / z3)
            + d_j[(1, 2)] * (2.0 * k.fy * y / z3);
    }

    let position_grad = d_pos_sh + prep.cam.rot_cw.transpose() * d_cam + acc.d_pos_world;

    FinalGrad {
        position: position_grad,
        scale: scale_grad,
        rotation: rotation_grad,
        sh: sh_grad,
        opacity: acc.d_alpha,
    }
}
