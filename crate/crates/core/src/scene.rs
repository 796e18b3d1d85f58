//! Synthetic RGBD scene generator: textured plane sets and box rooms with
//! analytic ground-truth depth, rendered along simple trajectories and
//! written in the manifest dataset format.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::write_manifest;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::se3::Pose;
use crate::types::CameraIntrinsics;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TextureKind {
    /// Two-tone checkerboard with the given cell size in meters.
    Checker { cell: f64 },
    /// Smooth bilinear value noise with the given lattice cell in meters.
    Noise { cell: f64 },
}

/// A finite textured rectangle: point, unit normal, in-plane extents.
#[derive(Debug, Clone)]
pub struct ScenePlane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub basis_u: Vector3<f64>,
    pub basis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: TextureKind,
    pub palette: usize,
}

impl ScenePlane {
    pub fn new(
        point: Vector3<f64>,
        normal: Vector3<f64>,
        half_u: f64,
        half_v: f64,
        texture: TextureKind,
        palette: usize,
    ) -> Self {
        let normal = normal.normalize();
        let helper = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let basis_u = normal.cross(&helper).normalize();
        let basis_v = normal.cross(&basis_u);
        Self { point, normal, basis_u, basis_v, half_u, half_v, texture, palette }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SceneGeometry {
    /// Axis-aligned room centered at the origin, z-up, floor at z = 0:
    /// six inward-facing walls.
    BoxRoom { width: f64, depth: f64, height: f64 },
    /// A fronto-parallel wall plus a tilted side wall and a floor strip,
    /// all visible from the origin looking +z.
    MultiPlane,
    /// Single fronto-parallel plane at the given distance.
    SinglePlane { distance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryKind {
    /// Camera on a horizontal circle looking radially outward, pitched
    /// down so floors are seen steeply enough for precise intersections.
    Orbit { radius: f64, height: f64, pitch_down_deg: f64 },
    /// Fixed pose for every frame.
    Static,
    /// Straight line between two points, orientation fixed toward +x.
    Line { from: [f64; 3], to: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub geometry: SceneGeometry,
    pub texture: TextureKind,
    pub trajectory: TrajectoryKind,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    pub seed: u64,
    pub depth_scale: f64,
    /// Interior boxes placed inside a box room. Empty rooms present single
    /// flat walls to many views, which no geometric tracker can lock onto.
    pub clutter: usize,
}

impl SceneSpec {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: self.width as f64 / 2.0 + 0.5,
            cy: self.height as f64 / 2.0 + 0.5,
            width: self.width,
            height: self.height,
            depth_scale: self.depth_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidParameter("frames must be ≥ 1".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::InvalidParameter("resolution below 16×16".into()));
        }
        if self.focal <= 0.0 {
            return Err(Error::InvalidParameter("focal must be positive".into()));
        }
        match self.geometry {
            SceneGeometry::BoxRoom { width, depth, height } => {
                if width <= 0.0 || depth <= 0.0 || height <= 0.0 {
                    return Err(Error::InvalidParameter("box room extents must be positive".into()));
                }
            }
            SceneGeometry::SinglePlane { distance } => {
                if distance <= 0.0 {
                    return Err(Error::InvalidParameter("plane distance must be positive".into()));
                }
            }
            SceneGeometry::MultiPlane => {}
        }
        Ok(())
    }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            geometry: SceneGeometry::BoxRoom { width: 3.6, depth: 3.6, height: 2.4 },
            texture: TextureKind::Noise { cell: 0.25 },
            trajectory: TrajectoryKind::Orbit { radius: 0.7, height: 1.0, pitch_down_deg: 18.0 },
            width: 320,
            height: 240,
            focal: 200.0,
            frames: 100,
            seed: 7,
            depth_scale: 1000.0,
            clutter: 6,
        }
    }
}

/// Instantiated scene: planes plus the camera trajectory.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub planes: Vec<ScenePlane>,
    pub poses: Vec<(f64, Pose)>,
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

pub fn build_scene(spec: &SceneSpec) -> Result<SceneModel> {
    spec.validate()?;
    let planes = match spec.geometry {
        SceneGeometry::BoxRoom { width, depth, height } => {
            let hw = width / 2.0;
            let hd = depth / 2.0;
            let mut planes = vec![
                // Walls face inward; room is centered on z between 0 and height.
                ScenePlane::new(Vector3::new(hw, 0.0, height / 2.0), -Vector3::x(), hd, height / 2.0, spec.texture, 0),
                ScenePlane::new(Vector3::new(-hw, 0.0, height / 2.0), Vector3::x(), hd, height / 2.0, spec.texture, 1),
                ScenePlane::new(Vector3::new(0.0, hd, height / 2.0), -Vector3::y(), hw, height / 2.0, spec.texture, 2),
                ScenePlane::new(Vector3::new(0.0, -hd, height / 2.0), Vector3::y(), hw, height / 2.0, spec.texture, 3),
                ScenePlane::new(Vector3::new(0.0, 0.0, height), -Vector3::z(), hw, hd, spec.texture, 4),
                ScenePlane::new(Vector3::new(0.0, 0.0, 0.0), Vector3::z(), hw, hd, spec.texture, 5),
            ];
            // Slender yawed boxes near the walls: their vertical faces pin
            // the horizontal axes while leaving the floor visible between
            // them for vertical constraints.
            for i in 0..spec.clutter {
                let phi = (i as f64 + 0.5) / spec.clutter as f64 * std::f64::consts::TAU;
                let r01 = |salt: u64| {
                    (hash64(spec.seed ^ (i as u64) << 8 ^ salt) >> 11) as f64 / (1u64 << 53) as f64
                };
                let ring = (0.72 + 0.08 * r01(5)) * hw.min(hd);
                let center = Vector3::new(ring * phi.cos(), ring * phi.sin(), 0.0);
                let half = Vector3::new(0.1 + 0.12 * r01(1), 0.1 + 0.12 * r01(2), 0.25 + 0.35 * r01(3));
                let yaw = r01(4) * std::f64::consts::TAU;
                add_clutter_box(&mut planes, center, half, yaw, spec.texture, 6 + i);
            }
            planes
        }
        SceneGeometry::MultiPlane => vec![
            // A concave corner: back wall, tilted side wall and tilted floor,
            // each large enough that the nearest-hit rule carves watertight
            // creases (no free-floating silhouettes inside the frustum).
            ScenePlane::new(Vector3::new(0.0, 0.0, 2.2), -Vector3::z(), 4.0, 4.0, spec.texture, 0),
            ScenePlane::new(
                Vector3::new(0.9, 0.0, 1.6),
                Vector3::new(-1.0, 0.0, -0.35),
                4.0,
                4.0,
                spec.texture,
                1,
            ),
            ScenePlane::new(
                Vector3::new(0.0, 0.55, 1.6),
                Vector3::new(0.0, -1.0, -0.15),
                4.0,
                4.0,
                spec.texture,
                2,
            ),
        ],
        SceneGeometry::SinglePlane { distance } => vec![ScenePlane::new(
            Vector3::new(0.0, 0.0, distance),
            -Vector3::z(),
            50.0,
            50.0,
            spec.texture,
            0,
        )],
    };

    let poses: Vec<(f64, Pose)> = (0..spec.frames)
        .map(|i| {
            let t = i as f64 / 30.0;
            let pose = match spec.trajectory {
                TrajectoryKind::Static => Pose::identity(),
                TrajectoryKind::Orbit { radius, height, pitch_down_deg } => {
                    let phi = i as f64 / spec.frames as f64 * std::f64::consts::TAU;
                    let (s, c) = phi.sin_cos();
                    let position = Vector3::new(radius * c, radius * s, height);
                    let pitch = pitch_down_deg.to_radians();
                    let (sp, cp) = pitch.sin_cos();
                    let forward = Vector3::new(c * cp, s * cp, -sp);
                    let right = Vector3::new(s, -c, 0.0);
                    let down = forward.cross(&right);
                    let rotation = Matrix3::from_columns(&[right, down, forward]);
                    Pose::new(rotation, position)
                }
                TrajectoryKind::Line { from, to } => {
                    let a = Vector3::from_row_slice(&from);
                    let b = Vector3::from_row_slice(&to);
                    let s = if spec.frames > 1 { i as f64 / (spec.frames - 1) as f64 } else { 0.0 };
                    Pose::new(Matrix3::identity(), a + (b - a) * s)
                }
            };
            (t, pose)
        })
        .collect();

    Ok(SceneModel { planes, poses, intrinsics: spec.intrinsics(), seed: spec.seed })
}

/// A box standing on the floor: four yawed side faces plus the top.
fn add_clutter_box(
    planes: &mut Vec<ScenePlane>,
    center: Vector3<f64>,
    half: Vector3<f64>,
    yaw: f64,
    texture: TextureKind,
    palette: usize,
) {
    let (s, c) = yaw.sin_cos();
    let ex = Vector3::new(c, s, 0.0);
    let ey = Vector3::new(-s, c, 0.0);
    let base = Vector3::new(center.x, center.y, half.z);
    planes.push(ScenePlane::new(base + ex * half.x, ex, half.y, half.z, texture, palette));
    planes.push(ScenePlane::new(base - ex * half.x, -ex, half.y, half.z, texture, palette + 1));
    planes.push(ScenePlane::new(base + ey * half.y, ey, half.x, half.z, texture, palette + 2));
    planes.push(ScenePlane::new(base - ey * half.y, -ey, half.x, half.z, texture, palette + 3));
    planes.push(ScenePlane::new(
        base + Vector3::new(0.0, 0.0, half.z),
        Vector3::z(),
        half.x,
        half.y,
        texture,
        palette + 4,
    ));
}

fn hash64(mut x: u64) -> u64 {
    // splitmix64 finalizer.
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn lattice_color(seed: u64, plane: usize, iu: i64, iv: i64) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (ch, v) in c.iter_mut().enumerate() {
        let h = hash64(
            seed ^ (plane as u64).wrapping_mul(0x1000193)
                ^ (iu as u64).wrapping_mul(0x100000001b3)
                ^ (iv as u64).wrapping_mul(0x9e3779b1)
                ^ (ch as u64) << 56,
        );
        // Keep away from 0/1 so u8 quantization never clips.
        *v = 0.15 + 0.7 * (h >> 11) as f64 / (1u64 << 53) as f64;
    }
    c
}

const PALETTES: [([f64; 3], [f64; 3]); 6] = [
    ([0.85, 0.3, 0.25], [0.2, 0.2, 0.25]),
    ([0.25, 0.75, 0.35], [0.9, 0.9, 0.85]),
    ([0.25, 0.4, 0.85], [0.85, 0.8, 0.3]),
    ([0.8, 0.5, 0.2], [0.25, 0.6, 0.65]),
    ([0.7, 0.25, 0.7], [0.85, 0.85, 0.8]),
    ([0.35, 0.35, 0.4], [0.75, 0.7, 0.6]),
];

fn texture_color(plane: &ScenePlane, seed: u64, u: f64, v: f64) -> [f64; 3] {
    match plane.texture {
        TextureKind::Checker { cell } => {
            let iu = (u / cell).floor() as i64;
            let iv = (v / cell).floor() as i64;
            let (a, b) = PALETTES[plane.palette % PALETTES.len()];
            if (iu + iv).rem_euclid(2) == 0 {
                a
            } else {
                b
            }
        }
        TextureKind::Noise { cell } => {
            let fu = u / cell;
            let fv = v / cell;
            let iu = fu.floor();
            let iv = fv.floor();
            let tu = fu - iu;
            let tv = fv - iv;
            let (iu, iv) = (iu as i64, iv as i64);
            let c00 = lattice_color(seed, plane.palette, iu, iv);
            let c10 = lattice_color(seed, plane.palette, iu + 1, iv);
            let c01 = lattice_color(seed, plane.palette, iu, iv + 1);
            let c11 = lattice_color(seed, plane.palette, iu + 1, iv + 1);
            let mut out = [0.0; 3];
            // Smoothstep weights keep the field C¹ so SH colors can fit it.
            let su = tu * tu * (3.0 - 2.0 * tu);
            let sv = tv * tv * (3.0 - 2.0 * tv);
            for ch in 0..3 {
                let a = c00[ch] * (1.0 - su) + c10[ch] * su;
                let b = c01[ch] * (1.0 - su) + c11[ch] * su;
                out[ch] = a * (1.0 - sv) + b * sv;
            }
            out
        }
    }
}

/// Analytic render of one view: exact depth (nearest ray/rectangle
/// intersection; the ray's unit z-component makes θ the camera depth) and
/// the procedural texture color.
pub fn render_scene_view(
    scene: &SceneModel,
    k: &CameraIntrinsics,
    pose: &Pose,
) -> (Grid<[f64; 3]>, Grid<f64>) {
    let mut color = Grid::new(k.width, k.height, [0.0; 3]);
    let mut depth = Grid::new(k.width, k.height, 0.0);
    for y in 0..k.height {
        for x in 0..k.width {
            let dir = pose.rotation * k.ray_dir(x, y);
            let origin = pose.translation;
            let mut best: Option<(f64, &ScenePlane, f64, f64)> = None;
            for plane in &scene.planes {
                let denom = dir.dot(&plane.normal);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let theta = (plane.point - origin).dot(&plane.normal) / denom;
                if theta <= 1e-9 {
                    continue;
                }
                let hit = origin + dir * theta;
                let rel = hit - plane.point;
                let u = rel.dot(&plane.basis_u);
                let v = rel.dot(&plane.basis_v);
                if u.abs() > plane.half_u || v.abs() > plane.half_v {
                    continue;
                }
                if best.map_or(true, |(t, _, _, _)| theta < t) {
                    best = Some((theta, plane, u, v));
                }
            }
            if let Some((theta, plane, u, v)) = best {
                depth.set(x, y, theta);
                color.set(x, y, texture_color(plane, scene.seed, u, v));
            }
        }
    }
    (color, depth)
}

/// Write the dataset directory: `manifest.txt`, `color/*.png`, `depth/*.png`.
pub fn generate_scene(spec: &SceneSpec, out_dir: &std::path::Path) -> Result<SceneModel> {
    let scene = build_scene(spec)?;
    std::fs::create_dir_all(out_dir.join("color"))?;
    std::fs::create_dir_all(out_dir.join("depth"))?;
    let k = &scene.intrinsics;
    for (i, (_, pose)) in scene.poses.iter().enumerate() {
        let (color, depth) = render_scene_view(&scene, k, pose);
        let mut color_img = image::RgbImage::new(k.width as u32, k.height as u32);
        for (x, y, c) in color.pixels() {
            let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            color_img.put_pixel(x as u32, y as u32, image::Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]));
        }
        color_img.save(out_dir.join(format!("color/{i:06}.png")))?;
        let mut depth_img =
            image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(k.width as u32, k.height as u32);
        for (x, y, d) in depth.pixels() {
            let units = (d * k.depth_scale).round().clamp(0.0, 65535.0) as u16;
            depth_img.put_pixel(x as u32, y as u32, image::Luma([units]));
        }
        depth_img.save(out_dir.join(format!("depth/{i:06}.png")))?;
    }
    write_manifest(out_dir, k, &scene.poses)?;
    Ok(scene)
}
