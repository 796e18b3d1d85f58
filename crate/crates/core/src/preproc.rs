//! RGBD input pre-processing: back-projection into vertex maps, normal
//! estimation, bilateral depth filtering and the multi-resolution pyramid
//! used by ICP.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::se3::Pose;
use crate::types::CameraIntrinsics;

/// Depth readings outside (0, MAX_DEPTH] meters are invalid.
pub const MAX_DEPTH: f64 = 10.0;
/// Neighbors further than this from the center depth do not contribute to
/// normals (avoids smearing normals across silhouettes).
pub const NORMAL_DEPTH_GUARD: f64 = 0.1;

#[inline]
pub fn depth_valid(d: f64) -> bool {
    d > 0.0 && d <= MAX_DEPTH && d.is_finite()
}

/// Per-pixel vertices and normals; `validity` marks pixels where both are
/// usable (finite vertex, unit normal).
#[derive(Debug, Clone)]
pub struct VertexNormalMaps {
    pub vertices: Grid<Vector3<f64>>,
    pub normals: Grid<Vector3<f64>>,
    pub validity: Grid<bool>,
}

impl VertexNormalMaps {
    pub fn width(&self) -> usize {
        self.vertices.width()
    }

    pub fn height(&self) -> usize {
        self.vertices.height()
    }
}

/// Back-project a depth map into camera-frame vertices: v(u) = d(u)·K⁻¹u̇.
/// Normals are left zeroed; validity reflects depth validity only.
pub fn backproject(depth: &Grid<f64>, k: &CameraIntrinsics) -> Result<VertexNormalMaps> {
    if depth.width() != k.width || depth.height() != k.height {
        return Err(Error::InvalidInput(format!(
            "depth {}x{} does not match intrinsics {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        )));
    }
    let mut vertices = Grid::new(k.width, k.height, Vector3::zeros());
    let mut validity = Grid::new(k.width, k.height, false);
    for y in 0..k.height {
        for x in 0..k.width {
            let d = depth.get(x, y);
            if depth_valid(d) {
                vertices.set(x, y, k.ray_dir(x, y) * d);
                validity.set(x, y, true);
            }
        }
    }
    Ok(VertexNormalMaps { vertices, normals: Grid::new(k.width, k.height, Vector3::zeros()), validity })
}

/// Fill normals from central differences of the vertex map, oriented toward
/// the camera (n_z < 0 in the camera frame). Border pixels and pixels whose
/// neighborhood crosses a depth discontinuity become invalid.
pub fn compute_normals(maps: &mut VertexNormalMaps) {
    let w = maps.width();
    let h = maps.height();
    let vertex_valid = maps.validity.clone();
    let mut normals = Grid::new(w, h, Vector3::zeros());
    let mut validity = Grid::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if !vertex_valid.get(x, y) {
                continue;
            }
            if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
                continue;
            }
            let ok = |xx: usize, yy: usize, center_z: f64| {
                vertex_valid.get(xx, yy)
                    && (maps.vertices.at(xx, yy).z - center_z).abs() <= NORMAL_DEPTH_GUARD
            };
            let cz = maps.vertices.at(x, y).z;
            if !(ok(x + 1, y, cz) && ok(x - 1, y, cz) && ok(x, y + 1, cz) && ok(x, y - 1, cz)) {
                continue;
            }
            let dx = maps.vertices.at(x + 1, y) - maps.vertices.at(x - 1, y);
            let dy = maps.vertices.at(x, y + 1) - maps.vertices.at(x, y - 1);
            let mut n = dx.cross(&dy);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            if n.z > 0.0 {
                n = -n;
            }
            normals.set(x, y, n);
            validity.set(x, y, true);
        }
    }
    maps.normals = normals;
    maps.validity = validity;
}

/// Edge-preserving bilateral filter on depth. Invalid pixels are left
/// untouched and excluded from every kernel.
pub fn bilateral_filter(depth: &Grid<f64>, spatial_sigma: f64, range_sigma: f64) -> Grid<f64> {
    assert!(spatial_sigma > 0.0 && range_sigma > 0.0);
    let w = depth.width();
    let h = depth.height();
    let radius = 2i64; // 5x5 window
    let inv_2ss = 0.5 / (spatial_sigma * spatial_sigma);
    let inv_2rs = 0.5 / (range_sigma * range_sigma);
    let mut out = depth.clone();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let center = depth.get(x, y);
                if !depth_valid(center) {
                    row.push(center);
                    continue;
                }
                let mut acc = 0.0;
                let mut weight = 0.0;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let xx = x as i64 + dx;
                        let yy = y as i64 + dy;
                        if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                            continue;
                        }
                        let d = depth.get(xx as usize, yy as usize);
                        if !depth_valid(d) {
                            continue;
                        }
                        let ws = (-((dx * dx + dy * dy) as f64) * inv_2ss).exp();
                        let dr = d - center;
                        let wr = (-(dr * dr) * inv_2rs).exp();
                        acc += ws * wr * d;
                        weight += ws * wr;
                    }
                }
                row.push(acc / weight);
            }
            row
        })
        .collect();
    for (y, row) in rows.into_iter().enumerate() {
        for (x, v) in row.into_iter().enumerate() {
            out.set(x, y, v);
        }
    }
    out
}

/// Downsample a depth map by 2, picking per 2×2 block the valid pixel whose
/// depth is closest to the block's valid average (never mixing values).
/// Returns the depth plus the source pixel of each output pixel.
fn downsample_depth(depth: &Grid<f64>) -> (Grid<f64>, Grid<(usize, usize)>) {
    let w = depth.width() / 2;
    let h = depth.height() / 2;
    let mut out = Grid::new(w, h, 0.0);
    let mut src = Grid::new(w, h, (0usize, 0usize));
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (sx, sy) in block(x, y) {
                let d = depth.get(sx, sy);
                if depth_valid(d) {
                    sum += d;
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let avg = sum / count as f64;
            let mut best = None;
            for (sx, sy) in block(x, y) {
                let d = depth.get(sx, sy);
                if !depth_valid(d) {
                    continue;
                }
                let err = (d - avg).abs();
                if best.map_or(true, |(e, _, _)| err < e) {
                    best = Some((err, sx, sy));
                }
            }
            let (_, sx, sy) = best.unwrap();
            out.set(x, y, depth.get(sx, sy));
            src.set(x, y, (sx, sy));
        }
    }
    (out, src)
}

fn block(x: usize, y: usize) -> [(usize, usize); 4] {
    [(2 * x, 2 * y), (2 * x + 1, 2 * y), (2 * x, 2 * y + 1), (2 * x + 1, 2 * y + 1)]
}

#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub depth: Grid<f64>,
    pub maps: VertexNormalMaps,
    pub intrinsics: CameraIntrinsics,
}

/// Multi-resolution pyramid; level 0 is full resolution, each level halves it.
#[derive(Debug, Clone)]
pub struct FramePyramid {
    pub levels: Vec<PyramidLevel>,
}

/// Build the pyramid from a (possibly pre-filtered) depth map. Vertices and
/// normals are recomputed per level from the downsampled depth and the
/// level intrinsics.
pub fn build_pyramid(depth: &Grid<f64>, k: &CameraIntrinsics, levels: usize) -> Result<FramePyramid> {
    if levels < 1 {
        return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
    }
    let mut out = Vec::with_capacity(levels);
    let mut current = depth.clone();
    for level in 0..levels {
        let lk = k.level(level);
        let mut maps = backproject(&current, &lk)?;
        compute_normals(&mut maps);
        out.push(PyramidLevel { depth: current.clone(), maps, intrinsics: lk });
        if level + 1 < levels {
            let (next, _) = downsample_depth(&current);
            current = next;
        }
    }
    Ok(FramePyramid { levels: out })
}

/// Transform maps into the global frame: vertices by the full rigid
/// transform, normals by rotation only. Invalid pixels pass through.
pub fn transform_maps(maps: &VertexNormalMaps, pose: &Pose) -> VertexNormalMaps {
    let mut vertices = maps.vertices.clone();
    let mut normals = maps.normals.clone();
    for y in 0..maps.height() {
        for x in 0..maps.width() {
            if !maps.validity.get(x, y) {
                continue;
            }
            vertices.set(x, y, pose.apply(maps.vertices.get(x, y)));
            normals.set(x, y, pose.rotate(maps.normals.get(x, y)));
        }
    }
    VertexNormalMaps { vertices, normals, validity: maps.validity.clone() }
}

pub use downsample::downsample_with_payload;

mod downsample {
    use super::*;

    /// Downsample depth together with a per-pixel payload (e.g. a rendered
    /// normal map), carrying the payload of the pixel chosen for depth.
    pub fn downsample_with_payload<T: Clone>(
        depth: &Grid<f64>,
        payload: &Grid<T>,
    ) -> (Grid<f64>, Grid<T>) {
        let (out, src) = super::downsample_depth(depth);
        let mut p = Grid::new(out.width(), out.height(), payload.get(0, 0));
        for y in 0..out.height() {
            for x in 0..out.width() {
                if depth_valid(out.get(x, y)) {
                    let (sx, sy) = src.get(x, y);
                    p.set(x, y, payload.get(sx, sy));
                }
            }
        }
        (out, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn intrinsics(w: usize, h: usize) -> CameraIntrinsics {
        // Principal point on a pixel center so the on-axis examples are exact.
        CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: w as f64 / 2.0 + 0.5,
            cy: h as f64 / 2.0 + 0.5,
            width: w,
            height: h,
            depth_scale: 1000.0,
        }
    }

    #[test]
    fn backproject_principal_ray() {
        let k = intrinsics(64, 48);
        let mut depth = Grid::new(64, 48, 0.0);
        depth.set(32, 24, 1.0); // pixel center (32.5, 24.5) == (cx, cy)
        let maps = backproject(&depth, &k).unwrap();
        assert!(maps.validity.get(32, 24));
        assert_relative_eq!(maps.vertices.get(32, 24), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_unit_tangent_offset() {
        // Pixel one focal length right of the principal point at depth 2 → (2, 0, 2).
        let mut k = intrinsics(256, 48);
        k.fx = 100.0;
        k.cx = 28.5;
        let mut depth = Grid::new(256, 48, 0.0);
        depth.set(128, 24, 2.0); // center 128.5 = cx + fx
        let maps = backproject(&depth, &k).unwrap();
        assert_relative_eq!(maps.vertices.get(128, 24), Vector3::new(2.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn backproject_rejects_size_mismatch() {
        let k = intrinsics(64, 48);
        let depth = Grid::new(32, 24, 1.0);
        assert!(backproject(&depth, &k).is_err());
    }

    #[test]
    fn backproject_project_round_trip() {
        let k = intrinsics(64, 48);
        let mut depth = Grid::new(64, 48, 0.0);
        let mut rng_state = 12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            0.5 + 4.0 * ((rng_state >> 11) as f64 / (1u64 << 53) as f64)
        };
        for y in 0..48 {
            for x in 0..64 {
                depth.set(x, y, next());
            }
        }
        let maps = backproject(&depth, &k).unwrap();
        for y in 0..48 {
            for x in 0..64 {
                let (px, py) = k.project(maps.vertices.get(x, y));
                assert_relative_eq!(px, x as f64 + 0.5, epsilon = 1e-6);
                assert_relative_eq!(py, y as f64 + 0.5, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn normals_on_fronto_parallel_plane() {
        let k = intrinsics(32, 32);
        let depth = Grid::new(32, 32, 1.0);
        let mut maps = backproject(&depth, &k).unwrap();
        compute_normals(&mut maps);
        for y in 1..31 {
            for x in 1..31 {
                assert!(maps.validity.get(x, y));
                assert_relative_eq!(maps.normals.get(x, y), Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
            }
        }
        // Borders get no normals.
        assert!(!maps.validity.get(0, 5));
    }

    #[test]
    fn normals_on_tilted_plane_match_analytic() {
        // Plane z = 1 + 0.1·x (x in meters): camera-facing normal ∝ (0.1, 0, -1).
        let k = intrinsics(64, 64);
        let mut depth = Grid::new(64, 64, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                // Solve z = 1 + 0.1 * (z * (x+0.5-cx)/fx) for z.
                let xr = (x as f64 + 0.5 - k.cx) / k.fx;
                let z = 1.0 / (1.0 - 0.1 * xr);
                depth.set(x, y, z);
            }
        }
        let mut maps = backproject(&depth, &k).unwrap();
        compute_normals(&mut maps);
        let expected = Vector3::new(0.1, 0.0, -1.0).normalize();
        for y in 2..62 {
            for x in 2..62 {
                assert!(maps.validity.get(x, y));
                let n = maps.normals.get(x, y);
                assert!(n.dot(&expected) > 1.0 - 1e-6, "normal {:?} at {},{}", n, x, y);
            }
        }
    }

    #[test]
    fn isolated_pixel_has_no_normal() {
        let k = intrinsics(16, 16);
        let mut depth = Grid::new(16, 16, 0.0);
        depth.set(8, 8, 1.0);
        let mut maps = backproject(&depth, &k).unwrap();
        compute_normals(&mut maps);
        assert!(!maps.validity.get(8, 8));
    }

    #[test]
    fn bilateral_constant_depth_unchanged() {
        let depth = Grid::new(16, 16, 1.5);
        let out = bilateral_filter(&depth, 2.0, 0.03);
        for v in out.data() {
            assert_relative_eq!(*v, 1.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn bilateral_preserves_step_edge() {
        let mut depth = Grid::new(32, 8, 1.0);
        for y in 0..8 {
            for x in 16..32 {
                depth.set(x, y, 2.0);
            }
        }
        let out = bilateral_filter(&depth, 2.0, 0.05);
        for y in 0..8 {
            assert!((out.get(14, y) - 1.0).abs() < 1e-6, "left side moved: {}", out.get(14, y));
            assert!((out.get(17, y) - 2.0).abs() < 1e-6, "right side moved: {}", out.get(17, y));
        }
    }

    #[test]
    fn bilateral_pulls_outlier_toward_neighborhood() {
        let mut depth = Grid::new(16, 16, 1.0);
        depth.set(8, 8, 1.05);
        let out = bilateral_filter(&depth, 2.0, 0.1);
        assert!(out.get(8, 8) < 1.05);
        assert!(out.get(8, 8) > 1.0);
    }

    #[test]
    fn pyramid_level_sizes_halve() {
        let k = CameraIntrinsics {
            fx: 525.0,
            fy: 525.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            depth_scale: 1000.0,
        };
        let depth = Grid::new(640, 480, 2.0);
        let pyr = build_pyramid(&depth, &k, 3).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        assert_eq!((pyr.levels[0].depth.width(), pyr.levels[0].depth.height()), (640, 480));
        assert_eq!((pyr.levels[1].depth.width(), pyr.levels[1].depth.height()), (320, 240));
        assert_eq!((pyr.levels[2].depth.width(), pyr.levels[2].depth.height()), (160, 120));
        for level in &pyr.levels {
            for v in level.depth.data() {
                assert_relative_eq!(*v, 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_single_level_is_identity() {
        let k = intrinsics(32, 32);
        let depth = Grid::new(32, 32, 1.25);
        let pyr = build_pyramid(&depth, &k, 1).unwrap();
        assert_eq!(pyr.levels.len(), 1);
        assert_eq!(pyr.levels[0].depth, depth);
    }

    #[test]
    fn transform_maps_rotation_and_translation() {
        let k = intrinsics(16, 16);
        let depth = Grid::new(16, 16, 1.0);
        let mut maps = backproject(&depth, &k).unwrap();
        compute_normals(&mut maps);

        let id = transform_maps(&maps, &Pose::identity());
        assert_eq!(id.vertices, maps.vertices);

        let t = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(1.0, 2.0, 3.0));
        let shifted = transform_maps(&maps, &t);
        let (x, y) = (8, 8);
        assert_relative_eq!(
            shifted.vertices.get(x, y),
            maps.vertices.get(x, y) + Vector3::new(1.0, 2.0, 3.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(shifted.normals.get(x, y), maps.normals.get(x, y), epsilon = 1e-12);

        // 90° about z: (x, y, z) → (−y, x, z); normals stay unit.
        let rot = crate::se3::se3_exp(nalgebra::Vector6::new(
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            std::f64::consts::FRAC_PI_2,
        ));
        let rotated = transform_maps(&maps, &rot);
        let v = maps.vertices.get(x, y);
        assert_relative_eq!(rotated.vertices.get(x, y), Vector3::new(-v.y, v.x, v.z), epsilon = 1e-12);
        assert_relative_eq!(rotated.normals.get(x, y).norm(), 1.0, epsilon = 1e-12);
    }
}
