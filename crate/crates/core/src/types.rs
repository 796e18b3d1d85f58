//! Core domain types: Gaussians, the map, camera intrinsics, RGBD frames and
//! render targets.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math;
use crate::sh;

pub const OPAQUE_ALPHA: f64 = 0.99;
pub const TRANSPARENT_ALPHA: f64 = 0.1;
/// Creation-time cap on a transparent Gaussian's largest axis, meters.
pub const TRANSPARENT_MAX_SCALE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaussianKind {
    Opaque,
    Transparent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaussianState {
    Unstable,
    Stable,
}

/// Creation-time geometry of a transparent Gaussian, used as the anchor of
/// the L2 regularizer that pins transparent splats in place.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryAnchor {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
}

/// One splat: geometry, appearance and lifecycle counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Positive axis lengths, meters.
    pub scale: Vector3<f64>,
    /// Unit quaternion (w, x, y, z).
    pub rotation: Vector4<f64>,
    /// Fixed at creation: 0.99 (opaque) or 0.1 (transparent).
    pub opacity: f64,
    /// SH coefficients, `(degree+1)²` entries of RGB each.
    pub sh: Vec<[f64; 3]>,
    /// Oriented disc normal; kept in sync with `rotation` (minimal axis,
    /// facing the most recent observing camera).
    pub normal: Vector3<f64>,
    /// Optimization-update counter η.
    pub confidence: u32,
    /// Error count e.
    pub errors: u32,
    /// Frame index at creation (reset when a stable Gaussian is demoted).
    pub created_at: u32,
    pub kind: GaussianKind,
    pub state: GaussianState,
    /// Present for transparent Gaussians only.
    pub anchor: Option<GeometryAnchor>,
}

impl Gaussian {
    /// New unstable opaque disc with DC color equal to `color`.
    pub fn new_opaque(
        position: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Vector4<f64>,
        color: [f64; 3],
        sh_degree: usize,
        created_at: u32,
    ) -> Self {
        let mut coeffs = vec![[0.0; 3]; sh::coeff_count(sh_degree)];
        coeffs[0] = sh::dc_from_color(color);
        let normal = math::rotated_min_axis(scale, rotation);
        Self {
            position,
            scale,
            rotation,
            opacity: OPAQUE_ALPHA,
            sh: coeffs,
            normal,
            confidence: 0,
            errors: 0,
            created_at,
            kind: GaussianKind::Opaque,
            state: GaussianState::Unstable,
            anchor: None,
        }
    }

    /// New unstable transparent disc; scale is clamped to the creation cap
    /// and the creation geometry is recorded as the regularizer anchor.
    pub fn new_transparent(
        position: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: Vector4<f64>,
        color: [f64; 3],
        sh_degree: usize,
        created_at: u32,
    ) -> Self {
        let s1 = scale.x.min(TRANSPARENT_MAX_SCALE);
        let scale = Vector3::new(s1, s1, 0.1 * s1);
        let mut g = Self::new_opaque(position, scale, rotation, color, sh_degree, created_at);
        g.opacity = TRANSPARENT_ALPHA;
        g.kind = GaussianKind::Transparent;
        g.anchor = Some(GeometryAnchor { position, scale, rotation });
        g
    }

    /// Orient the stored normal toward `viewer` (camera position).
    pub fn orient_normal_toward(&mut self, viewer: Vector3<f64>) {
        self.normal = math::orient_toward(self.normal, self.position, viewer);
    }

    /// Recompute the normal from the current rotation/scale, keeping the
    /// hemisphere of the stored normal when possible.
    pub fn refresh_normal(&mut self) {
        let n = math::rotated_min_axis(self.scale, self.rotation);
        self.normal = if n.dot(&self.normal) < 0.0 { -n } else { n };
    }

    pub fn validate(&self, sh_degree: usize) -> Result<()> {
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::InvalidParameter("gaussian scale must be positive".into()));
        }
        if (self.rotation.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter("gaussian rotation must be unit".into()));
        }
        let kind_ok = match self.kind {
            GaussianKind::Opaque => self.opacity == OPAQUE_ALPHA,
            GaussianKind::Transparent => self.opacity == TRANSPARENT_ALPHA,
        };
        if !kind_ok {
            return Err(Error::InvalidParameter("opacity inconsistent with kind".into()));
        }
        if self.kind == GaussianKind::Transparent {
            match &self.anchor {
                None => return Err(Error::InvalidParameter("transparent gaussian without anchor".into())),
                Some(a) => {
                    if a.scale.max() > TRANSPARENT_MAX_SCALE + 1e-12 {
                        return Err(Error::InvalidParameter(
                            "transparent creation scale exceeds cap".into(),
                        ));
                    }
                }
            }
        }
        if self.sh.len() != sh::coeff_count(sh_degree) {
            return Err(Error::InvalidParameter("sh coefficient count mismatch".into()));
        }
        let n = math::rotated_min_axis(self.scale, self.rotation);
        let aligned = n.dot(&self.normal).abs();
        if (aligned - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter("normal out of sync with rotation".into()));
        }
        Ok(())
    }
}

/// Stable reference to a map entry; the generation tag detects recycled slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GaussianId {
    pub slot: u32,
    pub generation: u32,
}

impl GaussianId {
    pub const NONE: GaussianId = GaussianId { slot: u32::MAX, generation: 0 };

    #[inline]
    pub fn is_none(&self) -> bool {
        self.slot == u32::MAX
    }
}

#[derive(Debug, Clone)]
struct Slot {
    generation: u32,
    gaussian: Option<Gaussian>,
}

/// Flat, index-addressed Gaussian collection with slot recycling.
///
/// Mutation goes through `&mut self`, so Rust's borrow rules give the
/// many-readers-xor-one-writer discipline for free; renders hold a shared
/// borrow and record `version()` so later backward passes can detect a map
/// that mutated in between.
#[derive(Debug, Clone)]
pub struct GaussianMap {
    slots: Vec<Slot>,
    free: Vec<u32>,
    live: usize,
    version: u64,
    sh_degree: usize,
}

impl GaussianMap {
    pub fn new(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_DEGREE, "sh degree above supported maximum");
        Self { slots: Vec::new(), free: Vec::new(), live: 0, version: 0, sh_degree }
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    /// Monotone counter bumped on every mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn insert(&mut self, gaussian: Gaussian) -> GaussianId {
        self.version += 1;
        self.live += 1;
        if let Some(slot) = self.free.pop() {
            let s = &mut self.slots[slot as usize];
            s.gaussian = Some(gaussian);
            GaussianId { slot, generation: s.generation }
        } else {
            self.slots.push(Slot { generation: 0, gaussian: Some(gaussian) });
            GaussianId { slot: (self.slots.len() - 1) as u32, generation: 0 }
        }
    }

    /// Remove a live Gaussian; its slot generation is bumped so stale index
    /// maps can never alias whatever gets the slot next.
    pub fn remove(&mut self, id: GaussianId) -> Option<Gaussian> {
        let s = self.slots.get_mut(id.slot as usize)?;
        if s.generation != id.generation || s.gaussian.is_none() {
            return None;
        }
        self.version += 1;
        self.live -= 1;
        s.generation += 1;
        self.free.push(id.slot);
        s.gaussian.take()
    }

    pub fn get(&self, id: GaussianId) -> Option<&Gaussian> {
        let s = self.slots.get(id.slot as usize)?;
        if s.generation != id.generation {
            return None;
        }
        s.gaussian.as_ref()
    }

    pub fn get_slot(&self, slot: u32) -> Option<&Gaussian> {
        self.slots.get(slot as usize).and_then(|s| s.gaussian.as_ref())
    }

    pub fn id_of_slot(&self, slot: u32) -> Option<GaussianId> {
        let s = self.slots.get(slot as usize)?;
        s.gaussian.as_ref()?;
        Some(GaussianId { slot, generation: s.generation })
    }

    /// Mutable access by slot. Bumps the version.
    pub fn get_slot_mut(&mut self, slot: u32) -> Option<&mut Gaussian> {
        self.version += 1;
        self.slots.get_mut(slot as usize).and_then(|s| s.gaussian.as_mut())
    }

    pub fn iter_live(&self) -> impl Iterator<Item = (u32, &Gaussian)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.gaussian.as_ref().map(|g| (i as u32, g)))
    }

    pub fn live_ids(&self) -> Vec<GaussianId> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.gaussian.as_ref().map(|_| GaussianId { slot: i as u32, generation: s.generation })
            })
            .collect()
    }

    pub fn count_state(&self, state: GaussianState) -> usize {
        self.iter_live().filter(|(_, g)| g.state == state).count()
    }

    pub fn count_kind(&self, kind: GaussianKind) -> usize {
        self.iter_live().filter(|(_, g)| g.kind == kind).count()
    }
}

/// Pinhole intrinsics plus image size and the depth-unit scale of the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Depth units per meter in the stored depth images.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64)
            || !(self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidParameter("principal point outside image".into()));
        }
        Ok(())
    }

    /// Intrinsics of pyramid level `level` (all parameters halved per level).
    pub fn level(&self, level: usize) -> CameraIntrinsics {
        let f = 0.5f64.powi(level as i32);
        CameraIntrinsics {
            fx: self.fx * f,
            fy: self.fy * f,
            cx: self.cx * f,
            cy: self.cy * f,
            width: self.width >> level,
            height: self.height >> level,
            depth_scale: self.depth_scale,
        }
    }

    /// Camera-frame ray direction through pixel center (x, y), z = 1.
    #[inline]
    pub fn ray_dir(&self, x: usize, y: usize) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Project a camera-frame point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, p: Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

/// Registered color + metric depth input frame. Depth ≤ 0 is invalid.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub color: Grid<[f64; 3]>,
    pub depth: Grid<f64>,
    pub frame_index: u32,
    pub timestamp: f64,
}

impl RgbdFrame {
    pub fn validate(&self) -> Result<()> {
        if !self.color.same_size(&self.depth) {
            return Err(Error::InvalidInput("color/depth size mismatch".into()));
        }
        let finite = self.color.data().iter().all(|c| c.iter().all(|v| v.is_finite()))
            && self.depth.data().iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("frame contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

pub const DEPTH_NO_HIT: f64 = -1.0;

/// Per-pixel outputs of one rasterization pass.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub color: Grid<[f64; 3]>,
    /// Remaining light energy, Π(1 − f_i) ∈ [0, 1].
    pub transmission: Grid<f64>,
    /// Camera-frame depth in meters, −1 where no disc was hit.
    pub depth: Grid<f64>,
    /// World-frame normal of the hit Gaussian, zero where no hit.
    pub normal: Grid<Vector3<f64>>,
    /// Hit Gaussian per pixel; `GaussianId::NONE` where no hit.
    pub index: Grid<GaussianId>,
    /// Map version the buffers were rendered from.
    pub map_version: u64,
}

impl RenderBuffers {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Check the cross-buffer consistency contract (disc-intersection mode).
    pub fn validate(&self) -> Result<()> {
        for (x, y, d) in self.depth.pixels() {
            let idx = *self.index.at(x, y);
            let t = *self.transmission.at(x, y);
            if !(0.0..=1.0 + 1e-12).contains(&t) {
                return Err(Error::InvalidInput(format!("transmission out of range at {},{}", x, y)));
            }
            if *d == DEPTH_NO_HIT {
                if !idx.is_none() {
                    return Err(Error::InvalidInput(format!("index without depth at {},{}", x, y)));
                }
            } else {
                if idx.is_none() {
                    return Err(Error::InvalidInput(format!("depth without index at {},{}", x, y)));
                }
                let n = self.normal.at(x, y);
                if (n.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!("hit normal not unit at {},{}", x, y)));
                }
            }
        }
        Ok(())
    }
}
