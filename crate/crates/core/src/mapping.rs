//! On-the-fly map maintenance: error-driven Gaussian adding, windowed
//! optimization restricted to unstable Gaussians and the pixels they cover,
//! weighted fusion of optimization results, and stable/unstable state
//! management.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::{compute_loss_and_grads, LossWeights};
use crate::math;
use crate::optimizer::{AdamOptimizer, LearningRates};
use crate::preproc::{depth_valid, VertexNormalMaps};
use crate::render::{render_transmission, RenderOptions, RenderSubset};
use crate::se3::Pose;
use crate::types::{
    CameraIntrinsics, Gaussian, GaussianId, GaussianMap, GaussianState, RenderBuffers, RgbdFrame,
    DEPTH_NO_HIT,
};

/// Thresholds, window sizes and learning rates of the mapping loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    /// Transmission above this marks a newly observed pixel (δ_T).
    pub delta_transmission: f64,
    /// Depth re-rendering error threshold, meters (δ_d).
    pub delta_depth: f64,
    /// Mean-absolute RGB error threshold (δ_c).
    pub delta_color: f64,
    /// Fraction of mask pixels sampled for adding.
    pub sample_ratio: f64,
    /// Frames per optimization window.
    pub window_size: usize,
    /// Optimization iterations per window.
    pub iterations: usize,
    /// Confidence count above which a Gaussian turns stable (δ_η).
    pub delta_confidence: u32,
    /// Error count above which a stable Gaussian is demoted (δ_e).
    pub delta_error: u32,
    /// Age in frames after which a never-stabilized Gaussian is removed (δ_t).
    pub delta_age: u32,
    pub weights: LossWeights,
    pub learning_rates: LearningRates,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            delta_transmission: 0.5,
            delta_depth: 0.1,
            delta_color: 0.1,
            sample_ratio: 0.05,
            window_size: 6,
            iterations: 50,
            delta_confidence: 100,
            delta_error: 3,
            delta_age: 30,
            weights: LossWeights::default(),
            learning_rates: LearningRates::default(),
        }
    }
}

impl Serialize for LossWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("LossWeights", 3)?;
        st.serialize_field("w_color", &self.color)?;
        st.serialize_field("w_depth", &self.depth)?;
        st.serialize_field("w_reg", &self.reg)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for LossWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(default)]
        struct Raw {
            w_color: f64,
            w_depth: f64,
            w_reg: f64,
        }
        impl Default for Raw {
            fn default() -> Self {
                let w = LossWeights::default();
                Raw { w_color: w.color, w_depth: w.depth, w_reg: w.reg }
            }
        }
        let raw = Raw::deserialize(d)?;
        Ok(LossWeights { color: raw.w_color, depth: raw.w_depth, reg: raw.w_reg })
    }
}

/// Where new Gaussians go: geometry mask (new surface) and color mask
/// (surface fine, appearance wrong). Disjoint by construction.
#[derive(Debug, Clone)]
pub struct AddMasks {
    pub geometry: Grid<bool>,
    pub color: Grid<bool>,
}

/// Classify valid-depth pixels into the geometry/color add masks from the
/// current renders: high transmission or large depth error (a missing hit
/// counts as exceeding) → geometry; otherwise large color error → color.
pub fn compute_add_masks(
    rendered: &RenderBuffers,
    frame: &RgbdFrame,
    cfg: &MappingConfig,
) -> Result<AddMasks> {
    if rendered.width() != frame.width() || rendered.height() != frame.height() {
        return Err(Error::InvalidInput("render/frame resolution mismatch".into()));
    }
    let w = frame.width();
    let h = frame.height();
    let mut geometry = Grid::new(w, h, false);
    let mut color = Grid::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let d_in = frame.depth.get(x, y);
            if !depth_valid(d_in) {
                continue;
            }
            let t = rendered.transmission.get(x, y);
            let d_hat = rendered.depth.get(x, y);
            let depth_exceeds = d_hat == DEPTH_NO_HIT || (d_hat - d_in).abs() > cfg.delta_depth;
            if t > cfg.delta_transmission || depth_exceeds {
                geometry.set(x, y, true);
                continue;
            }
            let c = rendered.color.at(x, y);
            let tc = frame.color.at(x, y);
            let err = ((c[0] - tc[0]).abs() + (c[1] - tc[1]).abs() + (c[2] - tc[2]).abs()) / 3.0;
            if err > cfg.delta_color {
                color.set(x, y, true);
            }
        }
    }
    Ok(AddMasks { geometry, color })
}

/// Uniformly sample ⌈ratio·|mask|⌉ pixels without replacement; deterministic
/// under a fixed rng state.
pub fn sample_mask(mask: &Grid<bool>, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    assert!(ratio > 0.0 && ratio <= 1.0, "sample ratio must be in (0, 1]");
    let mut pixels: Vec<(usize, usize)> =
        mask.pixels().filter(|(_, _, v)| **v).map(|(x, y, _)| (x, y)).collect();
    if pixels.is_empty() {
        return Vec::new();
    }
    let take = ((ratio * pixels.len() as f64).ceil() as usize).min(pixels.len());
    let (sampled, _) = pixels.partial_shuffle(rng, take);
    sampled.to_vec()
}

/// Disc scale for a new Gaussian at `position`: the mean over the three
/// nearest Gaussians of (center distance − mean of the two largest axis
/// lengths), through a square root, floored at 0.1 mm. With fewer than three
/// neighbors the caller-provided pixel-footprint fallback is used.
///
/// The square-root rule alone explodes when the nearest neighbors sit on a
/// different surface meters away (early frames, newly exposed regions): a
/// near-camera sample then mints a disc that eclipses the whole view. The
/// axis is therefore capped at 1.25× of both the mean neighbor distance and
/// `footprint`, the caller's sample-stride pixel footprint — enough to cover
/// the surface between samples with little overlap.
pub fn init_scale(
    position: Vector3<f64>,
    map: &GaussianMap,
    fallback: f64,
    footprint: f64,
) -> Vector3<f64> {
    const K_NEIGHBORS: usize = 3;
    const MIN_SCALE: f64 = 1e-4;
    const CAP: f64 = 1.25;
    let mut best: Vec<(f64, u32)> = Vec::with_capacity(K_NEIGHBORS + 1);
    for (slot, g) in map.iter_live() {
        let d = (g.position - position).norm();
        if best.len() < K_NEIGHBORS {
            best.push((d, slot));
            best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        } else if d < best[K_NEIGHBORS - 1].0 {
            best[K_NEIGHBORS - 1] = (d, slot);
            best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        }
    }
    let s1 = if best.len() < K_NEIGHBORS {
        fallback.clamp(MIN_SCALE, CAP * footprint.max(MIN_SCALE))
    } else {
        let mut acc = 0.0;
        let mut mean_dist = 0.0;
        for &(dist, slot) in &best {
            let g = map.get_slot(slot).expect("neighbor is live");
            let mut axes = [g.scale.x, g.scale.y, g.scale.z];
            axes.sort_by(|a, b| b.partial_cmp(a).unwrap());
            acc += dist - 0.5 * (axes[0] + axes[1]);
            mean_dist += dist;
        }
        let inner = acc / K_NEIGHBORS as f64;
        mean_dist /= K_NEIGHBORS as f64;
        if inner <= MIN_SCALE * MIN_SCALE {
            MIN_SCALE
        } else {
            inner.sqrt().min(CAP * mean_dist.min(footprint))
        }
    };
    Vector3::new(s1, s1, 0.1 * s1)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AddReport {
    pub opaque: usize,
    pub transparent: usize,
    pub skipped: usize,
}

/// Spawn Gaussians for the sampled mask pixels.
///
/// Geometry samples become opaque discs at the global vertex, oriented to the
/// pixel normal, DC color from the pixel. Color samples consult the index
/// map: an unstable hit is left to keep optimizing (skipped), a stable hit
/// gets a transparent residual-color Gaussian, and a no-hit sample (possible
/// at disc silhouettes) is promoted to the geometry path.
#[allow(clippy::too_many_arguments)]
pub fn add_gaussians(
    map: &mut GaussianMap,
    geometry_samples: &[(usize, usize)],
    color_samples: &[(usize, usize)],
    global_maps: &VertexNormalMaps,
    frame: &RgbdFrame,
    rendered_index: &Grid<GaussianId>,
    k: &CameraIntrinsics,
    camera_pos: Vector3<f64>,
    sample_stride_px: f64,
    frame_index: u32,
) -> AddReport {
    let mut report = AddReport::default();
    let sh_degree = map.sh_degree();

    #[allow(clippy::too_many_arguments)]
    fn spawn_disc(
        map: &mut GaussianMap,
        global_maps: &VertexNormalMaps,
        frame: &RgbdFrame,
        k: &CameraIntrinsics,
        camera_pos: Vector3<f64>,
        sample_stride_px: f64,
        frame_index: u32,
        sh_degree: usize,
        x: usize,
        y: usize,
        transparent: bool,
    ) -> bool {
        if !global_maps.validity.get(x, y) {
            return false;
        }
        let position = global_maps.vertices.get(x, y);
        let normal = global_maps.normals.get(x, y);
        let depth = frame.depth.get(x, y);
        let fallback = 2.0 * depth / k.fx;
        let footprint = sample_stride_px * depth / k.fx;
        let scale = init_scale(position, map, fallback, footprint);
        let rotation = math::quat_between(Vector3::z(), normal);
        let color = frame.color.get(x, y);
        let mut g = if transparent {
            Gaussian::new_transparent(position, scale, rotation, color, sh_degree, frame_index)
        } else {
            Gaussian::new_opaque(position, scale, rotation, color, sh_degree, frame_index)
        };
        g.orient_normal_toward(camera_pos);
        map.insert(g);
        true
    }

    for &(x, y) in geometry_samples {
        if spawn_disc(
            map, global_maps, frame, k, camera_pos, sample_stride_px, frame_index, sh_degree, x,
            y, false,
        ) {
            report.opaque += 1;
        } else {
            report.skipped += 1;
        }
    }

    for &(x, y) in color_samples {
        let id = rendered_index.get(x, y);
        if id.is_none() {
            // Silhouette case: no associated Gaussian, treat as new geometry.
            if spawn_disc(
                map, global_maps, frame, k, camera_pos, sample_stride_px, frame_index, sh_degree,
                x, y, false,
            ) {
                report.opaque += 1;
            } else {
                report.skipped += 1;
            }
            continue;
        }
        let unstable_hit =
            map.get(id).map_or(true, |hit| hit.state == GaussianState::Unstable);
        if unstable_hit {
            report.skipped += 1;
            continue;
        }
        if spawn_disc(
            map, global_maps, frame, k, camera_pos, sample_stride_px, frame_index, sh_degree, x,
            y, true,
        ) {
            report.transparent += 1;
        } else {
            report.skipped += 1;
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeScope {
    /// Optimize unstable Gaussians on the pixels they cover (tile-discarded).
    UnstableOnly,
    /// Optimize every Gaussian on every pixel (ablation reference).
    Everything,
}

#[derive(Debug, Clone, Default)]
pub struct OptimizeStats {
    pub iterations: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub losses: Vec<f64>,
    /// Wall time per iteration, seconds.
    pub iteration_seconds: Vec<f64>,
}

/// Windowed optimization: per iteration sample one window frame, mask the
/// pixels covered by unstable Gaussians (transmission of the unstable subset
/// below one), discard mostly-inactive tiles, render the full map over what
/// survives and step only the unstable Gaussians. A map without unstable
/// Gaussians is a no-op with zero iterations recorded.
pub fn optimize_window(
    map: &mut GaussianMap,
    window: &[(std::sync::Arc<RgbdFrame>, Pose)],
    k: &CameraIntrinsics,
    cfg: &MappingConfig,
    scope: OptimizeScope,
    rng: &mut ChaCha8Rng,
) -> OptimizeStats {
    assert!(!window.is_empty(), "optimize_window requires a nonempty window");
    let mut stats = OptimizeStats::default();
    let targets: Vec<u32> = match scope {
        OptimizeScope::UnstableOnly => map
            .iter_live()
            .filter(|(_, g)| g.state == GaussianState::Unstable)
            .map(|(s, _)| s)
            .collect(),
        OptimizeScope::Everything => map.iter_live().map(|(s, _)| s).collect(),
    };
    if targets.is_empty() {
        return stats;
    }
    let mut optimizer = AdamOptimizer::new(map, cfg.learning_rates)
        .with_position_decay(0.05, cfg.iterations);

    for iter in 0..cfg.iterations {
        let start = std::time::Instant::now();
        let (frame, pose) = &window[rng.gen_range(0..window.len())];

        let options = match scope {
            OptimizeScope::UnstableOnly => {
                let t_unstable = render_transmission(map, pose, k, RenderSubset::UnstableOnly);
                let mask = t_unstable.map(|t| *t < 1.0);
                RenderOptions {
                    active_pixel_mask: Some(mask),
                    grad_unstable_only: true,
                    ..Default::default()
                }
            }
            OptimizeScope::Everything => RenderOptions::default(),
        };

        let (loss, grads, _) = compute_loss_and_grads(map, pose, k, &options, frame, &cfg.weights);
        let sh_updated = optimizer.step(map, &grads, &targets, pose);
        for slot in sh_updated {
            if let Some(g) = map.get_slot_mut(slot) {
                g.confidence += 1;
            }
        }

        if iter == 0 {
            stats.first_loss = loss.total;
        }
        stats.last_loss = loss.total;
        stats.losses.push(loss.total);
        stats.iterations += 1;
        stats.iteration_seconds.push(start.elapsed().as_secs_f64());
    }
    stats
}

/// Snapshot of the fusible parameters of one Gaussian, tagged with its
/// confidence count.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: nalgebra::Vector4<f64>,
    pub sh: Vec<[f64; 3]>,
    pub confidence: u32,
}

impl FusionState {
    pub fn of(g: &Gaussian) -> Self {
        Self {
            position: g.position,
            scale: g.scale,
            rotation: g.rotation,
            sh: g.sh.clone(),
            confidence: g.confidence,
        }
    }
}

/// Weighted-average fusion of pre- and post-optimization parameters:
/// G = (1−w)·G_before + w·G_after with w = (η_after − η_before)/η_after.
/// Rotation uses normalized quaternion interpolation with the same weight.
pub fn fuse_optimized(before: &FusionState, after: &FusionState) -> Result<FusionState> {
    if after.confidence == 0 {
        return Err(Error::InvalidParameter("fusion requires at least one update".into()));
    }
    if after.confidence < before.confidence {
        return Err(Error::InvalidParameter("confidence must not decrease".into()));
    }
    let w = (after.confidence - before.confidence) as f64 / after.confidence as f64;
    let lerp3 = |a: Vector3<f64>, b: Vector3<f64>| a * (1.0 - w) + b * w;
    let mut sh = before.sh.clone();
    for (dst, src) in sh.iter_mut().zip(&after.sh) {
        for c in 0..3 {
            dst[c] = dst[c] * (1.0 - w) + src[c] * w;
        }
    }
    Ok(FusionState {
        position: lerp3(before.position, after.position),
        scale: lerp3(before.scale, after.scale),
        rotation: math::quat_nlerp(before.rotation, after.rotation, w),
        sh,
        confidence: after.confidence,
    })
}

/// Apply [`fuse_optimized`] across the map given pre-optimization snapshots;
/// Gaussians whose confidence did not move keep their snapshot parameters.
pub fn fuse_map(map: &mut GaussianMap, before: &HashMap<u32, FusionState>) {
    let mut slots: Vec<u32> = before.keys().copied().collect();
    slots.sort_unstable();
    for slot in slots {
        let prev = &before[&slot];
        let Some(g) = map.get_slot(slot) else { continue };
        let after = FusionState::of(g);
        if after.confidence == 0 || after.confidence == prev.confidence {
            continue;
        }
        let fused = fuse_optimized(prev, &after).expect("confidence checked above");
        let g = map.get_slot_mut(slot).expect("slot live");
        g.position = fused.position;
        g.scale = fused.scale;
        g.rotation = fused.rotation;
        g.sh = fused.sh;
        g.refresh_normal();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StateReport {
    pub error_increments: usize,
    pub demoted: usize,
    pub promoted: usize,
    pub removed: usize,
}

/// Error counting and state transitions from the post-optimization renders.
///
/// Per valid-depth pixel with a stable hit Gaussian: a color or depth error
/// above the thresholds increments that Gaussian's error count (at most once
/// per frame). Then stable Gaussians with e > δ_e are demoted (error,
/// confidence and age clocks restart), unstable ones with η > δ_η are
/// promoted, and unstable ones older than δ_t frames are removed as outliers.
pub fn manage_states(
    map: &mut GaussianMap,
    rendered: &RenderBuffers,
    frame: &RgbdFrame,
    cfg: &MappingConfig,
    frame_index: u32,
) -> StateReport {
    let mut report = StateReport::default();
    let mut errored: Vec<u32> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            if !depth_valid(frame.depth.get(x, y)) {
                continue;
            }
            let id = rendered.index.get(x, y);
            if id.is_none() {
                continue;
            }
            let Some(g) = map.get(id) else { continue };
            if g.state != GaussianState::Stable || seen.contains(&id.slot) {
                continue;
            }
            let c = rendered.color.at(x, y);
            let t = frame.color.at(x, y);
            let color_err = ((c[0] - t[0]).abs() + (c[1] - t[1]).abs() + (c[2] - t[2]).abs()) / 3.0;
            let d = rendered.depth.get(x, y);
            let depth_err =
                if d == DEPTH_NO_HIT { f64::INFINITY } else { (d - frame.depth.get(x, y)).abs() };
            if color_err > cfg.delta_color || depth_err > cfg.delta_depth {
                seen.insert(id.slot);
                errored.push(id.slot);
            }
        }
    }
    report.error_increments = errored.len();
    for slot in errored {
        if let Some(g) = map.get_slot_mut(slot) {
            g.errors += 1;
        }
    }

    let ids = map.live_ids();
    for id in &ids {
        let g = map.get(*id).expect("live");
        if g.state == GaussianState::Stable && g.errors > cfg.delta_error {
            let g = map.get_slot_mut(id.slot).unwrap();
            g.state = GaussianState::Unstable;
            g.errors = 0;
            g.confidence = 0;
            g.created_at = frame_index;
            report.demoted += 1;
        }
    }
    for id in &ids {
        let Some(g) = map.get(*id) else { continue };
        if g.state == GaussianState::Unstable && g.confidence > cfg.delta_confidence {
            map.get_slot_mut(id.slot).unwrap().state = GaussianState::Stable;
            report.promoted += 1;
        }
    }
    for id in &ids {
        let Some(g) = map.get(*id) else { continue };
        if g.state == GaussianState::Unstable
            && frame_index.saturating_sub(g.created_at) > cfg.delta_age
        {
            map.remove(*id);
            report.removed += 1;
        }
    }
    report
}
