//! Keyframe selection and the lower-intensity global optimization pass that
//! runs whenever a keyframe is added, plus the final refinement after the
//! scan ends.
//!
//! Global passes optimize every Gaussian (stable included) on the top 40%
//! color-error pixels of each selected keyframe, with the position learning
//! rate forced to zero and the remaining rates at 0.1×. Confidence counts
//! are not touched: these passes refine appearance, they are not evidence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::grid::Grid;
use crate::loss::compute_loss_and_grads;
use crate::mapping::MappingConfig;
use crate::optimizer::AdamOptimizer;
use crate::render::{render_forward, RenderOptions};
use crate::se3::Pose;
use crate::types::{CameraIntrinsics, GaussianMap, RenderBuffers, RgbdFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlobalOptConfig {
    /// Relative rotation that new frames must exceed to become keyframes.
    pub delta_angle_deg: f64,
    /// Relative translation threshold, meters.
    pub delta_move: f64,
    /// Prior keyframes drawn per global step, besides the latest.
    pub random_keyframes: usize,
    /// Fraction of pixels (by descending color error) each pass optimizes.
    pub top_error_fraction: f64,
    /// Multiplier on the mapping learning rates (position stays frozen).
    pub lr_scale: f64,
    /// Final refinement runs this many iterations per recorded keyframe.
    pub final_iters_per_keyframe: usize,
}

impl Default for GlobalOptConfig {
    fn default() -> Self {
        Self {
            delta_angle_deg: 30.0,
            delta_move: 0.3,
            random_keyframes: 3,
            top_error_fraction: 0.4,
            lr_scale: 0.1,
            final_iters_per_keyframe: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub frame_index: u32,
    pub pose: Pose,
    pub frame: Arc<RgbdFrame>,
}

/// Keyframes in strictly increasing frame order.
#[derive(Debug, Clone, Default)]
pub struct KeyframeStore {
    keyframes: Vec<Keyframe>,
}

impl KeyframeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn last(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    pub fn get(&self, i: usize) -> &Keyframe {
        &self.keyframes[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.iter()
    }

    fn push(&mut self, kf: Keyframe) {
        if let Some(last) = self.keyframes.last() {
            assert!(kf.frame_index > last.frame_index, "keyframe indices must increase");
        }
        self.keyframes.push(kf);
    }
}

/// Append a keyframe iff relative motion to the last keyframe exceeds the
/// thresholds (or the store is empty). Pure in the pose arguments.
pub fn maybe_add_keyframe(
    store: &mut KeyframeStore,
    frame_index: u32,
    pose: &Pose,
    frame: &Arc<RgbdFrame>,
    cfg: &GlobalOptConfig,
) -> bool {
    let trigger = match store.last() {
        None => true,
        Some(last) => {
            let angle = last.pose.rotation_angle_to(pose).to_degrees();
            let dist = last.pose.translation_distance_to(pose);
            angle > cfg.delta_angle_deg || dist > cfg.delta_move
        }
    };
    if trigger {
        store.push(Keyframe { frame_index, pose: *pose, frame: frame.clone() });
    }
    trigger
}

/// Mask of the `fraction` highest mean-absolute-color-error pixels, ties
/// broken by row-major pixel index.
pub fn top_error_mask(rendered: &RenderBuffers, frame: &RgbdFrame, fraction: f64) -> Grid<bool> {
    let w = frame.width();
    let h = frame.height();
    let mut errs: Vec<(f64, usize)> = Vec::with_capacity(w * h);
    for (x, y, c) in rendered.color.pixels() {
        let t = frame.color.at(x, y);
        let e = ((c[0] - t[0]).abs() + (c[1] - t[1]).abs() + (c[2] - t[2]).abs()) / 3.0;
        errs.push((e, y * w + x));
    }
    errs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let take = ((fraction * (w * h) as f64).floor() as usize).min(errs.len());
    let mut mask = Grid::new(w, h, false);
    for &(_, idx) in errs.iter().take(take) {
        mask.data_mut()[idx] = true;
    }
    mask
}

#[derive(Debug, Clone, Default)]
pub struct GlobalOptStats {
    pub selected: Vec<u32>,
    pub passes: usize,
    pub mean_loss: f64,
}

fn optimize_on_keyframe(
    map: &mut GaussianMap,
    kf: &Keyframe,
    k: &CameraIntrinsics,
    mapping: &MappingConfig,
    cfg: &GlobalOptConfig,
    optimizer: &mut AdamOptimizer,
    targets: &[u32],
) -> f64 {
    let rendered = render_forward(map, &kf.pose, k, &RenderOptions::default());
    let mask = top_error_mask(&rendered, &kf.frame, cfg.top_error_fraction);
    let options = RenderOptions {
        active_pixel_mask: Some(mask),
        tile_keep_fraction: 0.0,
        ..Default::default()
    };
    let (loss, grads, _) =
        compute_loss_and_grads(map, &kf.pose, k, &options, &kf.frame, &mapping.weights);
    optimizer.step(map, &grads, targets, &kf.pose);
    loss.total
}

fn global_lrs(mapping: &MappingConfig, cfg: &GlobalOptConfig) -> crate::optimizer::LearningRates {
    mapping.learning_rates.scaled(cfg.lr_scale).with_position(0.0)
}

/// One global pass, triggered when a keyframe is added: the latest keyframe
/// plus up to `random_keyframes` distinct prior ones, one optimization pass
/// over all Gaussians per selected frame.
pub fn global_optimize_step(
    map: &mut GaussianMap,
    store: &KeyframeStore,
    k: &CameraIntrinsics,
    mapping: &MappingConfig,
    cfg: &GlobalOptConfig,
    rng: &mut ChaCha8Rng,
) -> GlobalOptStats {
    let mut stats = GlobalOptStats::default();
    if store.is_empty() || map.is_empty() {
        return stats;
    }
    let latest = store.len() - 1;
    let mut selected = vec![latest];
    let mut prior: Vec<usize> = (0..latest).collect();
    for _ in 0..cfg.random_keyframes.min(latest) {
        let i = rng.gen_range(0..prior.len());
        selected.push(prior.swap_remove(i));
    }

    let targets: Vec<u32> = map.iter_live().map(|(s, _)| s).collect();
    let mut optimizer = AdamOptimizer::new(map, global_lrs(mapping, cfg));
    let mut total = 0.0;
    for &idx in &selected {
        total +=
            optimize_on_keyframe(map, store.get(idx), k, mapping, cfg, &mut optimizer, &targets);
        stats.passes += 1;
    }
    stats.selected = selected.iter().map(|&i| store.get(i).frame_index).collect();
    stats.mean_loss = total / stats.passes.max(1) as f64;
    stats
}

/// Post-scan refinement: 10 iterations per recorded keyframe, each sampling
/// one keyframe uniformly, same masking and learning-rate rules.
pub fn final_refinement(
    map: &mut GaussianMap,
    store: &KeyframeStore,
    k: &CameraIntrinsics,
    mapping: &MappingConfig,
    cfg: &GlobalOptConfig,
    rng: &mut ChaCha8Rng,
) -> GlobalOptStats {
    let mut stats = GlobalOptStats::default();
    if store.is_empty() || map.is_empty() {
        return stats;
    }
    let iterations = cfg.final_iters_per_keyframe * store.len();
    let targets: Vec<u32> = map.iter_live().map(|(s, _)| s).collect();
    let mut optimizer = AdamOptimizer::new(map, global_lrs(mapping, cfg));
    let mut total = 0.0;
    for _ in 0..iterations {
        let idx = rng.gen_range(0..store.len());
        total +=
            optimize_on_keyframe(map, store.get(idx), k, mapping, cfg, &mut optimizer, &targets);
        stats.passes += 1;
    }
    stats.mean_loss = total / stats.passes.max(1) as f64;
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::quat_identity;
    use crate::se3::se3_exp;
    use crate::types::{Gaussian, GaussianState};
    use nalgebra::{Vector3, Vector6};
    use rand_chacha::rand_core::SeedableRng;

    fn camera(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 150.0,
            fy: 150.0,
            cx: w as f64 / 2.0 + 0.5,
            cy: h as f64 / 2.0 + 0.5,
            width: w,
            height: h,
            depth_scale: 1000.0,
        }
    }

    fn frame(k: &CameraIntrinsics, depth: f64, color: [f64; 3]) -> Arc<RgbdFrame> {
        Arc::new(RgbdFrame {
            color: Grid::new(k.width, k.height, color),
            depth: Grid::new(k.width, k.height, depth),
            frame_index: 0,
            timestamp: 0.0,
        })
    }

    #[test]
    fn keyframe_trigger_thresholds() {
        let k = camera(16, 16);
        let f = frame(&k, 2.0, [0.5; 3]);
        let cfg = GlobalOptConfig::default();
        let mut store = KeyframeStore::new();

        assert!(maybe_add_keyframe(&mut store, 0, &Pose::identity(), &f, &cfg), "first frame");
        // 0.31 m translation, no rotation → keyframe.
        let moved = se3_exp(Vector6::new(0.31, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert!(maybe_add_keyframe(&mut store, 1, &moved, &f, &cfg));
        // 0.1 m / 10° from the last keyframe → no.
        let small = moved.compose(&se3_exp(Vector6::new(
            0.1,
            0.0,
            0.0,
            0.0,
            0.0,
            10f64.to_radians(),
        )));
        assert!(!maybe_add_keyframe(&mut store, 2, &small, &f, &cfg));
        assert_eq!(store.len(), 2);
        // 31° rotation alone → keyframe.
        let rotated = moved.compose(&se3_exp(Vector6::new(
            0.0,
            0.0,
            0.0,
            0.0,
            0.0,
            31f64.to_radians(),
        )));
        assert!(maybe_add_keyframe(&mut store, 3, &rotated, &f, &cfg));
    }

    #[test]
    fn top_error_mask_covers_exact_fraction_with_index_ties() {
        let k = camera(20, 20);
        let f = frame(&k, 2.0, [0.5; 3]);
        let rendered = RenderBuffers {
            color: Grid::new(20, 20, [0.0; 3]),
            transmission: Grid::new(20, 20, 1.0),
            depth: Grid::new(20, 20, -1.0),
            normal: Grid::new(20, 20, Vector3::zeros()),
            index: Grid::new(20, 20, crate::types::GaussianId::NONE),
            map_version: 0,
        };
        let mask = top_error_mask(&rendered, &f, 0.4);
        assert_eq!(mask.count_true(), 160, "40% of 400 pixels");
        // Equal errors: ties resolve to the lowest row-major indices.
        assert!(mask.data()[..160].iter().all(|v| *v));
        assert!(mask.data()[160..].iter().all(|v| !*v));
    }

    fn scene_with_color_error(k: &CameraIntrinsics) -> (GaussianMap, Arc<RgbdFrame>) {
        let mut map = GaussianMap::new(1);
        let id = map.insert(Gaussian::new_opaque(
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::new(1.5, 1.5, 0.15),
            quat_identity(),
            [0.48, 0.52, 0.5],
            1,
            0,
        ));
        map.get_slot_mut(id.slot).unwrap().state = GaussianState::Stable;
        (map, frame(k, 2.0, [0.5; 3]))
    }

    #[test]
    fn global_step_freezes_positions_and_reduces_loss() {
        let k = camera(48, 48);
        let (mut map, f) = scene_with_color_error(&k);
        let mut store = KeyframeStore::new();
        let cfg = GlobalOptConfig::default();
        maybe_add_keyframe(&mut store, 0, &Pose::identity(), &f, &cfg);

        let positions_before: Vec<_> = map.iter_live().map(|(_, g)| g.position).collect();
        let mapping = MappingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..30 {
            let stats = global_optimize_step(&mut map, &store, &k, &mapping, &cfg, &mut rng);
            assert_eq!(stats.passes, 1, "single keyframe store");
            first.get_or_insert(stats.mean_loss);
            last = stats.mean_loss;
        }
        let positions_after: Vec<_> = map.iter_live().map(|(_, g)| g.position).collect();
        assert_eq!(positions_before, positions_after, "positions bit-identical");
        assert!(last < first.unwrap(), "loss decreased: {} → {}", first.unwrap(), last);
        // Confidence untouched by global passes.
        assert!(map.iter_live().all(|(_, g)| g.confidence == 0));
    }

    #[test]
    fn final_refinement_iteration_count_and_empty_noop() {
        let k = camera(32, 32);
        let (mut map, f) = scene_with_color_error(&k);
        let cfg = GlobalOptConfig::default();
        let mapping = MappingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);

        let empty = KeyframeStore::new();
        let stats = final_refinement(&mut map, &empty, &k, &mapping, &cfg, &mut rng);
        assert_eq!(stats.passes, 0, "empty store is a no-op");

        let mut store = KeyframeStore::new();
        for i in 0..5u32 {
            let pose = se3_exp(Vector6::new(0.31 * (i as f64 + 1.0), 0.0, 0.0, 0.0, 0.0, 0.0));
            assert!(maybe_add_keyframe(&mut store, i, &pose, &f, &cfg));
        }
        let stats = final_refinement(&mut map, &store, &k, &mapping, &cfg, &mut rng);
        assert_eq!(stats.passes, 50, "10 × keyframe count");
    }
}
