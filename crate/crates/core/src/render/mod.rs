//! Tile-based forward rasterization of the Gaussian map.
//!
//! Color and transmission follow front-to-back alpha blending of the
//! splatted 2D Gaussians. Depth is rendered differently: the first opaque
//! Gaussian along the ray whose blending weight exceeds `alpha_hit_threshold`
//! is treated as an oriented disc and the pixel depth is the ray/disc-plane
//! intersection (falling back to the Gaussian center depth when ray and disc
//! normal are closer than 30° to perpendicular). Transparent Gaussians can
//! never pass the hit threshold, so they contribute color only.
//!
//! The whole pass is deterministic regardless of the rayon worker count:
//! tiles are rendered independently and written back in tile order.

mod backward;

pub use backward::{render_backward, ParamGrads};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math;
use crate::se3::Pose;
use crate::sh;
use crate::types::{
    CameraIntrinsics, Gaussian, GaussianId, GaussianKind, GaussianMap, GaussianState,
    RenderBuffers, DEPTH_NO_HIT,
};

pub const TILE_SIZE: usize = 16;
/// Contributions below 1/255 are skipped; above this cap they are clamped.
pub const F_MIN: f64 = 1.0 / 255.0;
pub const F_MAX: f64 = 0.99;
/// Color accumulation stops once the remaining transmission drops below this.
pub const EARLY_STOP_TRANSMISSION: f64 = 1e-4;
/// Diagonal regularization of the 2D covariance, px².
pub const COV2D_REG: f64 = 0.3;
const Z_NEAR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    /// Ray/disc-plane intersection of the first dense opaque Gaussian.
    DiscIntersection,
    /// Alpha-blended per-Gaussian center depths (ablation mode).
    AlphaBlend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderSubset {
    All,
    UnstableOnly,
}

#[derive(Debug, Clone)]
pub struct RenderOptions {
    /// δ_α = e^{−0.5}: blending weight a Gaussian must reach to count as the
    /// depth hit (the density range within one standard deviation).
    pub alpha_hit_threshold: f64,
    /// Ray/normal angle above which the disc intersection is replaced by the
    /// Gaussian center depth, degrees.
    pub normal_angle_limit_deg: f64,
    /// Pixels outside this mask produce sentinel outputs.
    pub active_pixel_mask: Option<Grid<bool>>,
    /// Tiles with a lower fraction of active pixels are discarded entirely.
    pub tile_keep_fraction: f64,
    /// Optional cap on the SH degree used for color evaluation.
    pub sh_degree_clamp: Option<usize>,
    pub depth_mode: DepthMode,
    pub subset: RenderSubset,
    /// Zero the gradients of stable Gaussians in the backward pass.
    pub grad_unstable_only: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            alpha_hit_threshold: (-0.5f64).exp(),
            normal_angle_limit_deg: 60.0,
            active_pixel_mask: None,
            tile_keep_fraction: 0.5,
            sh_degree_clamp: None,
            depth_mode: DepthMode::DiscIntersection,
            subset: RenderSubset::All,
            grad_unstable_only: false,
        }
    }
}

/// A Gaussian splatted into pixel space, with the intermediates the backward
/// pass needs cached.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub view_depth: f64,
    pub color_eval: [f64; 3],
    pub source_index: u32,
    pub id: GaussianId,
    pub kind: GaussianKind,
    pub state: GaussianState,
    pub opacity: f64,
    pub position: Vector3<f64>,
    /// Rotated minimal axis in world frame (sign-free; depth is even in it).
    pub normal: Vector3<f64>,
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub view_dir: Vector3<f64>,
    pub view_dist: f64,
    pub aabb_min: Vector2<f64>,
    pub aabb_max: Vector2<f64>,
}

pub(crate) struct CamFrame {
    pub rot_wc: Matrix3<f64>,
    pub rot_cw: Matrix3<f64>,
    pub t_cw: Vector3<f64>,
    pub cam_pos: Vector3<f64>,
}

impl CamFrame {
    pub fn new(pose: &Pose) -> Self {
        let inv = pose.inverse();
        Self {
            rot_wc: pose.rotation,
            rot_cw: inv.rotation,
            t_cw: inv.translation,
            cam_pos: pose.translation,
        }
    }
}

pub(crate) fn project_gaussian_internal(
    g: &Gaussian,
    id: GaussianId,
    cam: &CamFrame,
    k: &CameraIntrinsics,
    sh_degree: usize,
) -> Option<ProjectedGaussian> {
    let cam_point = cam.rot_cw * g.position + cam.t_cw;
    let z = cam_point.z;
    if z <= Z_NEAR {
        return None;
    }
    let (mx, my) = k.project(cam_point);
    let mean2d = Vector2::new(mx, my);

    let (x, y) = (cam_point.x, cam_point.y);
    let jacobian = Matrix2x3::new(
        k.fx / z,
        0.0,
        -k.fx * x / (z * z),
        0.0,
        k.fy / z,
        -k.fy * y / (z * z),
    );
    let q = math::quat_normalize(g.rotation);
    let rot = math::quat_to_matrix(q);
    let d = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let cov_world = rot * d * rot.transpose();
    let cov_cam = cam.rot_cw * cov_world * cam.rot_cw.transpose();
    let mut cov2d = jacobian * cov_cam * jacobian.transpose();
    cov2d[(0, 0)] += COV2D_REG;
    cov2d[(1, 1)] += COV2D_REG;

    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

    let rx = 3.0 * cov2d[(0, 0)].sqrt();
    let ry = 3.0 * cov2d[(1, 1)].sqrt();
    let aabb_min = Vector2::new(mx - rx, my - ry);
    let aabb_max = Vector2::new(mx + rx, my + ry);
    if aabb_max.x < 0.0
        || aabb_max.y < 0.0
        || aabb_min.x > k.width as f64
        || aabb_min.y > k.height as f64
    {
        return None;
    }

    let to_gauss = g.position - cam.cam_pos;
    let view_dist = to_gauss.norm().max(1e-12);
    let view_dir = to_gauss / view_dist;
    let color_eval = sh::eval(sh_degree, &g.sh, view_dir);

    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        view_depth: z,
        color_eval,
        source_index: id.slot,
        id,
        kind: g.kind,
        state: g.state,
        opacity: g.opacity,
        position: g.position,
        normal: math::rotated_min_axis(g.scale, g.rotation),
        cam_point,
        jacobian,
        cov_cam,
        view_dir,
        view_dist,
        aabb_min,
        aabb_max,
    })
}

/// Project one Gaussian; `None` means culled (behind the camera or the 3σ
/// footprint lies entirely off-screen).
pub fn project_gaussian(
    g: &Gaussian,
    id: GaussianId,
    pose: &Pose,
    k: &CameraIntrinsics,
    sh_degree: usize,
) -> Option<ProjectedGaussian> {
    project_gaussian_internal(g, id, &CamFrame::new(pose), k, sh_degree)
}

#[derive(Debug, Clone)]
pub struct TileBins {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Per tile, projection indices sorted front-to-back (ties by slot).
    pub lists: Vec<Vec<u32>>,
}

/// Assign each projection to every tile its 3σ AABB overlaps and sort each
/// tile list by ascending view depth (ties broken by the source slot).
pub fn bin_and_sort(
    projections: &[ProjectedGaussian],
    width: usize,
    height: usize,
    tile_size: usize,
) -> TileBins {
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let ts = tile_size as f64;
    for (i, p) in projections.iter().enumerate() {
        let tx0 = (p.aabb_min.x / ts).floor().max(0.0) as usize;
        let ty0 = (p.aabb_min.y / ts).floor().max(0.0) as usize;
        let tx1 = ((p.aabb_max.x / ts).floor() as isize).clamp(0, tiles_x as isize - 1) as usize;
        let ty1 = ((p.aabb_max.y / ts).floor() as isize).clamp(0, tiles_y as isize - 1) as usize;
        if tx0 >= tiles_x || ty0 >= tiles_y {
            continue;
        }
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    for list in &mut lists {
        list.sort_by(|&a, &b| {
            let pa = &projections[a as usize];
            let pb = &projections[b as usize];
            pa.view_depth
                .partial_cmp(&pb.view_depth)
                .unwrap()
                .then(pa.source_index.cmp(&pb.source_index))
        });
    }
    TileBins { tiles_x, tiles_y, lists }
}

/// Tiles to keep for a given active-pixel mask: a tile survives iff the
/// fraction of active pixels among its in-image pixels is ≥ `keep_fraction`.
pub fn active_tiles(mask: &Grid<bool>, tile_size: usize, keep_fraction: f64) -> Grid<bool> {
    let tiles_x = mask.width().div_ceil(tile_size);
    let tiles_y = mask.height().div_ceil(tile_size);
    let mut out = Grid::new(tiles_x, tiles_y, false);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let x1 = ((tx + 1) * tile_size).min(mask.width());
            let y1 = ((ty + 1) * tile_size).min(mask.height());
            let mut active = 0usize;
            let mut total = 0usize;
            for y in ty * tile_size..y1 {
                for x in tx * tile_size..x1 {
                    total += 1;
                    if mask.get(x, y) {
                        active += 1;
                    }
                }
            }
            out.set(tx, ty, total > 0 && active as f64 >= keep_fraction * total as f64);
        }
    }
    out
}

pub(crate) struct FramePrep {
    pub projections: Vec<ProjectedGaussian>,
    pub bins: TileBins,
    pub tile_active: Grid<bool>,
    pub cam: CamFrame,
    pub sh_degree: usize,
    pub cos_angle_limit: f64,
}

pub(crate) fn prepare(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    options: &RenderOptions,
) -> FramePrep {
    let cam = CamFrame::new(pose);
    let sh_degree = {
        let full = map.sh_degree();
        options.sh_degree_clamp.map_or(full, |c| c.min(full))
    };
    let mut projections = Vec::new();
    for (slot, g) in map.iter_live() {
        if options.subset == RenderSubset::UnstableOnly && g.state != GaussianState::Unstable {
            continue;
        }
        let id = GaussianId { slot, generation: map.id_of_slot(slot).map_or(0, |i| i.generation) };
        if let Some(p) = project_gaussian_internal(g, id, &cam, k, sh_degree) {
            projections.push(p);
        }
    }
    let bins = bin_and_sort(&projections, k.width, k.height, TILE_SIZE);
    let tile_active = match &options.active_pixel_mask {
        Some(mask) => active_tiles(mask, TILE_SIZE, options.tile_keep_fraction),
        None => Grid::new(bins.tiles_x, bins.tiles_y, true),
    };
    FramePrep {
        projections,
        bins,
        tile_active,
        cam,
        sh_degree,
        cos_angle_limit: (options.normal_angle_limit_deg.to_radians()).cos(),
    }
}

/// Walk one pixel's sorted list with the shared acceptance rules, invoking
/// `contrib(proj_idx, f, t_before)` for every color contribution. Returns
/// the final transmission and the depth hit (projection index and f), if any.
///
/// Once transmission drops below [`EARLY_STOP_TRANSMISSION`] color
/// accumulation stops; in disc mode the scan continues until a hit is found.
#[inline]
pub(crate) fn walk_pixel(
    projections: &[ProjectedGaussian],
    list: &[u32],
    px: f64,
    py: f64,
    hit_threshold: f64,
    alpha_mode: bool,
    mut contrib: impl FnMut(u32, f64, f64),
) -> (f64, Option<(u32, f64)>) {
    let mut t = 1.0;
    let mut color_on = true;
    let mut hit: Option<(u32, f64)> = None;
    for &pi in list {
        let p = &projections[pi as usize];
        if px < p.aabb_min.x || px > p.aabb_max.x || py < p.aabb_min.y || py > p.aabb_max.y {
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
        let f = (p.opacity * (-0.5 * q).exp()).min(F_MAX);
        if f < F_MIN {
            continue;
        }
        if color_on {
            contrib(pi, f, t);
        }
        if hit.is_none() && p.kind == GaussianKind::Opaque && f > hit_threshold {
            hit = Some((pi, f));
        }
        if color_on {
            t *= 1.0 - f;
            if t < EARLY_STOP_TRANSMISSION {
                color_on = false;
            }
        }
        if !color_on && (alpha_mode || hit.is_some()) {
            break;
        }
    }
    (t, hit)
}

struct TileOut {
    tx: usize,
    ty: usize,
    color: Vec<[f64; 3]>,
    trans: Vec<f64>,
    depth: Vec<f64>,
    normal: Vec<Vector3<f64>>,
    index: Vec<GaussianId>,
}

/// Rasterize the map into [`RenderBuffers`].
pub fn render_forward(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    options: &RenderOptions,
) -> RenderBuffers {
    let prep = prepare(map, pose, k, options);
    render_forward_prepared(map, k, options, &prep)
}

pub(crate) fn render_forward_prepared(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    options: &RenderOptions,
    prep: &FramePrep,
) -> RenderBuffers {
    let (w, h) = (k.width, k.height);
    let alpha_mode = options.depth_mode == DepthMode::AlphaBlend;
    let tiles: Vec<TileOut> = (0..prep.bins.lists.len())
        .into_par_iter()
        .map(|tile_idx| {
            let tx = tile_idx % prep.bins.tiles_x;
            let ty = tile_idx / prep.bins.tiles_x;
            let x1 = ((tx + 1) * TILE_SIZE).min(w);
            let y1 = ((ty + 1) * TILE_SIZE).min(h);
            let tw = x1 - tx * TILE_SIZE;
            let th = y1 - ty * TILE_SIZE;
            let mut out = TileOut {
                tx,
                ty,
                color: vec![[0.0; 3]; tw * th],
                trans: vec![1.0; tw * th],
                depth: vec![DEPTH_NO_HIT; tw * th],
                normal: vec![Vector3::zeros(); tw * th],
                index: vec![GaussianId::NONE; tw * th],
            };
            if !prep.tile_active.get(tx, ty) {
                return out;
            }
            let list = &prep.bins.lists[tile_idx];
            if list.is_empty() {
                return out;
            }
            for y in ty * TILE_SIZE..y1 {
                for x in tx * TILE_SIZE..x1 {
                    if let Some(mask) = &options.active_pixel_mask {
                        if !mask.get(x, y) {
                            continue;
                        }
                    }
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let mut color = [0.0f64; 3];
                    let mut depth_blend = 0.0f64;
                    let mut blend_weight = 0.0f64;
                    let (t, hit) = walk_pixel(
                        &prep.projections,
                        list,
                        px,
                        py,
                        options.alpha_hit_threshold,
                        alpha_mode,
                        |pi, f, t_before| {
                            let p = &prep.projections[pi as usize];
                            let wgt = f * t_before;
                            color[0] += p.color_eval[0] * wgt;
                            color[1] += p.color_eval[1] * wgt;
                            color[2] += p.color_eval[2] * wgt;
                            if alpha_mode {
                                depth_blend += p.cam_point.z * wgt;
                                blend_weight += wgt;
                            }
                        },
                    );
                    let li = (y - ty * TILE_SIZE) * tw + (x - tx * TILE_SIZE);
                    out.color[li] = color;
                    out.trans[li] = t;
                    if let Some((pi, _)) = hit {
                        let p = &prep.projections[pi as usize];
                        out.index[li] = p.id;
                        out.normal[li] =
                            math::orient_toward(p.normal, p.position, prep.cam.cam_pos);
                        if !alpha_mode {
                            out.depth[li] = disc_depth(p, x, y, k, &prep.cam, prep.cos_angle_limit);
                        }
                    }
                    if alpha_mode {
                        out.depth[li] = if blend_weight > 0.0 { depth_blend } else { DEPTH_NO_HIT };
                        if out.depth[li] == DEPTH_NO_HIT {
                            out.index[li] = GaussianId::NONE;
                            out.normal[li] = Vector3::zeros();
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut buffers = RenderBuffers {
        color: Grid::new(w, h, [0.0; 3]),
        transmission: Grid::new(w, h, 1.0),
        depth: Grid::new(w, h, DEPTH_NO_HIT),
        normal: Grid::new(w, h, Vector3::zeros()),
        index: Grid::new(w, h, GaussianId::NONE),
        map_version: map.version(),
    };
    for tile in tiles {
        let x0 = tile.tx * TILE_SIZE;
        let y0 = tile.ty * TILE_SIZE;
        let tw = ((tile.tx + 1) * TILE_SIZE).min(w) - x0;
        let th = ((tile.ty + 1) * TILE_SIZE).min(h) - y0;
        for yy in 0..th {
            for xx in 0..tw {
                let li = yy * tw + xx;
                buffers.color.set(x0 + xx, y0 + yy, tile.color[li]);
                buffers.transmission.set(x0 + xx, y0 + yy, tile.trans[li]);
                buffers.depth.set(x0 + xx, y0 + yy, tile.depth[li]);
                buffers.normal.set(x0 + xx, y0 + yy, tile.normal[li]);
                buffers.index.set(x0 + xx, y0 + yy, tile.index[li]);
            }
        }
    }
    buffers
}

/// Camera-frame depth of the ray/disc intersection for a hit Gaussian, or the
/// Gaussian center depth when ray and normal are nearly perpendicular.
#[inline]
pub(crate) fn disc_depth(
    p: &ProjectedGaussian,
    x: usize,
    y: usize,
    k: &CameraIntrinsics,
    cam: &CamFrame,
    cos_angle_limit: f64,
) -> f64 {
    let dir_world = cam.rot_wc * k.ray_dir(x, y);
    let denom = dir_world.dot(&p.normal);
    let cos_angle = denom.abs() / dir_world.norm();
    if cos_angle > cos_angle_limit {
        (p.position - cam.cam_pos).dot(&p.normal) / denom
    } else {
        p.cam_point.z
    }
}

/// Transmission-only render of a subset of the map; used to build the
/// unstable-pixel mask without paying for SH evaluation or depth.
pub fn render_transmission(
    map: &GaussianMap,
    pose: &Pose,
    k: &CameraIntrinsics,
    subset: RenderSubset,
) -> Grid<f64> {
    let options = RenderOptions { subset, sh_degree_clamp: Some(0), ..Default::default() };
    let prep = prepare(map, pose, k, &options);
    let (w, h) = (k.width, k.height);
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![1.0f64; w];
            let ty = y / TILE_SIZE;
            for x in 0..w {
                let list = &prep.bins.lists[ty * prep.bins.tiles_x + x / TILE_SIZE];
                if list.is_empty() {
                    continue;
                }
                let (t, _) = walk_pixel(
                    &prep.projections,
                    list,
                    x as f64 + 0.5,
                    y as f64 + 0.5,
                    options.alpha_hit_threshold,
                    true,
                    |_, _, _| {},
                );
                row[x] = t;
            }
            row
        })
        .collect();
    let mut out = Grid::new(w, h, 1.0);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, v) in row.into_iter().enumerate() {
            out.set(x, y, v);
        }
    }
    out
}

/// Write render buffers as image files: `<prefix>_color.png`,
/// `<prefix>_transmission.png`, `<prefix>_depth.png` (16-bit, millimeters)
/// and `<prefix>_depth.pfm` (32-bit float raster).
pub fn dump_buffers(buffers: &RenderBuffers, dir: &std::path::Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (buffers.width() as u32, buffers.height() as u32);

    let mut color = image::RgbImage::new(w, h);
    for (x, y, c) in buffers.color.pixels() {
        let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        color.put_pixel(x as u32, y as u32, image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]));
    }
    color.save(dir.join(format!("{prefix}_color.png")))?;

    let mut trans = image::GrayImage::new(w, h);
    for (x, y, t) in buffers.transmission.pixels() {
        trans.put_pixel(x as u32, y as u32, image::Luma([(t.clamp(0.0, 1.0) * 255.0) as u8]));
    }
    trans.save(dir.join(format!("{prefix}_transmission.png")))?;

    let mut depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w, h);
    for (x, y, d) in buffers.depth.pixels() {
        let mm = if *d <= 0.0 { 0 } else { (d * 1000.0).round().min(65535.0) as u16 };
        depth.put_pixel(x as u32, y as u32, image::Luma([mm]));
    }
    depth.save(dir.join(format!("{prefix}_depth.png")))?;

    write_pfm(&buffers.depth, &dir.join(format!("{prefix}_depth.pfm")))?;
    Ok(())
}

/// Grayscale PFM (32-bit float, little-endian, bottom-up rows as per spec).
pub fn write_pfm(grid: &Grid<f64>, path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "Pf\n{} {}\n-1.0\n", grid.width(), grid.height())?;
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            file.write_all(&(grid.get(x, y) as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Validate that backward inputs match the forward render.
pub(crate) fn check_version(map: &GaussianMap, buffers: &RenderBuffers) -> Result<()> {
    if buffers.map_version != map.version() {
        return Err(Error::StaleSnapshot { buffers: buffers.map_version, map: map.version() });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
