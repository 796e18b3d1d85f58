//! Re-rendering loss: L = w_c·L1(color) + w_d·L1(depth) + w_reg·L2(transparent
//! geometry drift), with cotangent assembly for the rasterizer backward pass.
//!
//! Depth terms are skipped on pixels with no disc hit or invalid input depth;
//! pixels with invalid input depth are excluded from every term.

use rayon::prelude::*;

use crate::grid::Grid;
use crate::preproc::depth_valid;
use crate::render::{
    self, active_tiles, ParamGrads, RenderOptions, TILE_SIZE,
};
use crate::se3::Pose;
use crate::types::{
    CameraIntrinsics, GaussianKind, GaussianMap, GaussianState, RenderBuffers, RgbdFrame,
    DEPTH_NO_HIT,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub color: f64,
    pub depth: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { color: 1.0, depth: 1.0, reg: 1000.0 }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossStats {
    pub color_l1: f64,
    pub depth_l1: f64,
    pub reg_l2: f64,
    pub total: f64,
    pub color_pixels: usize,
    pub depth_pixels: usize,
}

/// Pixels the loss runs over: the active mask intersected with surviving
/// tiles (all pixels when no mask is set).
fn effective_active(options: &RenderOptions, width: usize, height: usize) -> Grid<bool> {
    match &options.active_pixel_mask {
        None => Grid::new(width, height, true),
        Some(mask) => {
            let tiles = active_tiles(mask, TILE_SIZE, options.tile_keep_fraction);
            let mut out = Grid::new(width, height, false);
            for y in 0..height {
                for x in 0..width {
                    out.set(x, y, mask.get(x, y) && tiles.get(x / TILE_SIZE, y / TILE_SIZE));
                }
            }
            out
        }
    }
}

fn loss_terms(
    buffers: &RenderBuffers,
    frame: &RgbdFrame,
    active: &Grid<bool>,
) -> (f64, usize, f64, usize) {
    let w = buffers.width();
    let h = buffers.height();
    let per_row: Vec<(f64, usize, f64, usize)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut color_err = 0.0;
            let mut color_px = 0usize;
            let mut depth_err = 0.0;
            let mut depth_px = 0usize;
            for x in 0..w {
                if !active.get(x, y) || !depth_valid(frame.depth.get(x, y)) {
                    continue;
                }
                let c = buffers.color.at(x, y);
                let t = frame.color.at(x, y);
                color_err += (c[0] - t[0]).abs() + (c[1] - t[1]).abs() + (c[2] - t[2]).abs();
                color_px += 1;
                let d = buffers.depth.get(x, y);
                if d != DEPTH_NO_HIT {
                    depth_err += (d - frame.depth.get(x, y)).abs();
                    depth_px += 1;
                }
            }
            (color_err, color_px, depth_err, depth_px)
        })
        .collect();
    let mut acc = (0.0, 0usize, 0.0, 0usize);
    for r in per_row {
        acc.0 += r.0;
        acc.1 += r.1;
        acc.2 += r.2;
        acc.3 += r.3;
    }
    acc
}

fn reg_term(map: &GaussianMap) -> f64 {
    map.iter_live()
        .filter(|(_, g)| g.kind == GaussianKind::Transparent)
        .map(|(_, g)| {
            let a = g.anchor.as_ref().expect("transparent gaussian has anchor");
            (g.position - a.position).norm_squared()
                + (g.scale - a.scale).norm_squared()
                + (g.rotation - a.rotation).norm_squared()
        })
        .sum()
}

fn assemble(stats_in: (f64, usize, f64, usize), reg: f64, weights: &LossWeights) -> LossStats {
    let (color_err, color_px, depth_err, depth_px) = stats_in;
    let color_l1 = if color_px > 0 { color_err / (3.0 * color_px as f64) } else { 0.0 };
    let depth_l1 = if depth_px > 0 { depth_err / depth_px as f64 } else { 0.0 };
    LossStats {
        color_l1,
        depth_l1,
        reg_l2: reg,
        total: weights.color * color_l1 + weights.depth * depth_l1 + weights.reg * reg,
        color_pixels: color_px,
        depth_pixels: depth_px,
    }
}

/// Forward-only loss evaluation (used by tests as the finite-difference
/// reference and by reporting).
pub fn compute_loss(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    options: &RenderOptions,
    frame: &RgbdFrame,
    weights: &LossWeights,
) -> (LossStats, RenderBuffers) {
    let buffers = render::render_forward(map, pose, k, options);
    let active = effective_active(options, k.width, k.height);
    let stats = assemble(loss_terms(&buffers, frame, &active), reg_term(map), weights);
    (stats, buffers)
}

/// Loss plus parameter gradients through the rasterizer backward pass and
/// the transparent-geometry regularizer.
pub fn compute_loss_and_grads(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    options: &RenderOptions,
    frame: &RgbdFrame,
    weights: &LossWeights,
) -> (LossStats, ParamGrads, RenderBuffers) {
    let buffers = render::render_forward(map, pose, k, options);
    let active = effective_active(options, k.width, k.height);
    let (color_err, color_px, depth_err, depth_px) = loss_terms(&buffers, frame, &active);
    let stats = assemble((color_err, color_px, depth_err, depth_px), reg_term(map), weights);

    let w = k.width;
    let h = k.height;
    let color_norm =
        if color_px > 0 { weights.color / (3.0 * color_px as f64) } else { 0.0 };
    let depth_norm = if depth_px > 0 { weights.depth / depth_px as f64 } else { 0.0 };
    let mut d_color = Grid::new(w, h, [0.0f64; 3]);
    let mut d_depth = Grid::new(w, h, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            if !active.get(x, y) || !depth_valid(frame.depth.get(x, y)) {
                continue;
            }
            let c = buffers.color.at(x, y);
            let t = frame.color.at(x, y);
            let mut dc = [0.0; 3];
            for ch in 0..3 {
                dc[ch] = color_norm * (c[ch] - t[ch]).signum_or_zero();
            }
            d_color.set(x, y, dc);
            let d = buffers.depth.get(x, y);
            if d != DEPTH_NO_HIT {
                d_depth.set(x, y, depth_norm * (d - frame.depth.get(x, y)).signum_or_zero());
            }
        }
    }

    let mut grads = render::render_backward(map, pose, k, options, &buffers, &d_color, &d_depth)
        .expect("buffers rendered from same map state");

    // Transparent-geometry pinning: w_reg · Σ (‖Δp‖² + ‖Δq‖² + ‖Δs‖²).
    for (slot, g) in map.iter_live() {
        if g.kind != GaussianKind::Transparent {
            continue;
        }
        if options.grad_unstable_only && g.state != GaussianState::Unstable {
            continue;
        }
        let a = g.anchor.as_ref().expect("transparent gaussian has anchor");
        let s = slot as usize;
        grads.position[s] += 2.0 * weights.reg * (g.position - a.position);
        grads.scale[s] += 2.0 * weights.reg * (g.scale - a.scale);
        grads.rotation[s] += 2.0 * weights.reg * (g.rotation - a.rotation);
    }

    (stats, grads, buffers)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    #[inline]
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
