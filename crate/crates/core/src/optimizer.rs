//! Per-parameter-group Adam over selected Gaussians.
//!
//! Scale is optimized in log space (positivity for free), rotation as a raw
//! quaternion re-normalized after each step, and opacity carries a zero
//! learning rate so the gradients are computed but discarded. Gaussians whose
//! gradients are all zero in a step are skipped entirely, so untouched
//! parameters stay bit-identical.

use nalgebra::{Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::render::ParamGrads;
use crate::se3::Pose;
use crate::types::GaussianMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub sh0: f64,
    pub sh_rest: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        // lr_SHrest = 0.05 × lr_SH0; lr_α stays 0 (opacity is fixed).
        Self {
            position: 0.001,
            sh0: 0.0005,
            sh_rest: 0.05 * 0.0005,
            scale: 0.004,
            rotation: 0.001,
            opacity: 0.0,
        }
    }
}

impl LearningRates {
    /// All rates scaled by `f` (used by global optimization at 0.1×).
    pub fn scaled(&self, f: f64) -> Self {
        Self {
            position: self.position * f,
            sh0: self.sh0 * f,
            sh_rest: self.sh_rest * f,
            scale: self.scale * f,
            rotation: self.rotation * f,
            opacity: self.opacity * f,
        }
    }

    pub fn with_position(&self, position: f64) -> Self {
        Self { position, ..*self }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default)]
struct Moment<T> {
    m: T,
    v: T,
}

struct SlotState {
    step: u32,
    position: Moment<Vector3<f64>>,
    log_scale: Moment<Vector3<f64>>,
    rotation: Moment<Vector4<f64>>,
    sh: Vec<Moment<[f64; 3]>>,
}

/// Optimizer state for one optimization window; constructed fresh per window.
pub struct AdamOptimizer {
    lrs: LearningRates,
    slots: Vec<Option<SlotState>>,
    coeff_count: usize,
    position_lr_decay: f64,
    steps_taken: u32,
}

impl AdamOptimizer {
    pub fn new(map: &GaussianMap, lrs: LearningRates) -> Self {
        Self {
            lrs,
            slots: (0..map.slot_count()).map(|_| None).collect(),
            coeff_count: crate::sh::coeff_count(map.sh_degree()),
            position_lr_decay: 1.0,
            steps_taken: 0,
        }
    }

    /// Decay the position rate exponentially to `floor`×initial over
    /// `total_steps` optimizer steps, so positions converge under full rate
    /// and settle instead of dithering at a fixed amplitude.
    pub fn with_position_decay(mut self, floor: f64, total_steps: usize) -> Self {
        if total_steps > 1 && floor > 0.0 && floor < 1.0 {
            self.position_lr_decay = floor.powf(1.0 / (total_steps as f64 - 1.0));
        }
        self
    }

    /// Apply one Adam step to every target slot with a nonzero gradient.
    /// Returns the slots whose SH coefficients received a nonzero update
    /// (the confidence-count increment set).
    pub fn step(
        &mut self,
        map: &mut GaussianMap,
        grads: &ParamGrads,
        targets: &[u32],
        observer: &Pose,
    ) -> Vec<u32> {
        let mut sh_updated = Vec::new();
        let position_lr =
            self.lrs.position * self.position_lr_decay.powi(self.steps_taken as i32);
        self.steps_taken += 1;
        for &slot in targets {
            let s = slot as usize;
            let touched = grads.position[s] != Vector3::zeros()
                || grads.scale[s] != Vector3::zeros()
                || grads.rotation[s] != Vector4::zeros()
                || grads.opacity[s] != 0.0
                || grads.sh[s].iter().any(|c| *c != [0.0; 3]);
            if !touched {
                continue;
            }
            if grads.sh_nonzero(slot) {
                sh_updated.push(slot);
            }
            let state = self.slots[s].get_or_insert_with(|| SlotState {
                step: 0,
                position: Moment::default(),
                log_scale: Moment::default(),
                rotation: Moment::default(),
                sh: vec![Moment::default(); self.coeff_count],
            });
            state.step += 1;
            let t = state.step as i32;
            let bc1 = 1.0 - BETA1.powi(t);
            let bc2 = 1.0 - BETA2.powi(t);

            let Some(g) = map.get_slot_mut(slot) else { continue };

            if position_lr > 0.0 {
                let gr = grads.position[s];
                for i in 0..3 {
                    g.position[i] -=
                        adam_delta(&mut state.position, i, gr[i], position_lr, bc1, bc2);
                }
            }
            if self.lrs.scale > 0.0 {
                // Chain into log space: d/d(ln s) = s · d/ds.
                for i in 0..3 {
                    let gr = grads.scale[s][i] * g.scale[i];
                    let delta =
                        adam_delta(&mut state.log_scale, i, gr, self.lrs.scale, bc1, bc2);
                    g.scale[i] = (g.scale[i].ln() - delta).exp();
                }
            }
            if self.lrs.rotation > 0.0 {
                let gr = grads.rotation[s];
                let mut q = g.rotation;
                for i in 0..4 {
                    q[i] -= adam_delta4(&mut state.rotation, i, gr[i], self.lrs.rotation, bc1, bc2);
                }
                g.rotation = math::quat_normalize(q);
            }
            for (ci, moment) in state.sh.iter_mut().enumerate() {
                let lr = if ci == 0 { self.lrs.sh0 } else { self.lrs.sh_rest };
                if lr <= 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    let gr = grads.sh[s][ci][ch];
                    let m = BETA1 * moment.m[ch] + (1.0 - BETA1) * gr;
                    let v = BETA2 * moment.v[ch] + (1.0 - BETA2) * gr * gr;
                    moment.m[ch] = m;
                    moment.v[ch] = v;
                    g.sh[ci][ch] -= lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                }
            }
            // Opacity learning rate is zero by contract: gradient discarded.

            if self.lrs.rotation > 0.0 || self.lrs.scale > 0.0 {
                g.refresh_normal();
                g.orient_normal_toward(observer.translation);
            }
        }
        sh_updated
    }
}

#[inline]
fn adam_delta(
    moment: &mut Moment<Vector3<f64>>,
    i: usize,
    grad: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) -> f64 {
    let m = BETA1 * moment.m[i] + (1.0 - BETA1) * grad;
    let v = BETA2 * moment.v[i] + (1.0 - BETA2) * grad * grad;
    moment.m[i] = m;
    moment.v[i] = v;
    lr * (m / bc1) / ((v / bc2).sqrt() + EPS)
}

#[inline]
fn adam_delta4(
    moment: &mut Moment<Vector4<f64>>,
    i: usize,
    grad: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) -> f64 {
    let m = BETA1 * moment.m[i] + (1.0 - BETA1) * grad;
    let v = BETA2 * moment.v[i] + (1.0 - BETA2) * grad * grad;
    moment.m[i] = m;
    moment.v[i] = v;
    lr * (m / bc1) / ((v / bc2).sqrt() + EPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::quat_identity;
    use crate::types::Gaussian;

    fn map_with_one() -> GaussianMap {
        let mut map = GaussianMap::new(1);
        map.insert(Gaussian::new_opaque(
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.1, 0.1, 0.01),
            quat_identity(),
            [0.5; 3],
            1,
            0,
        ));
        map
    }

    #[test]
    fn step_moves_against_gradient_and_keeps_scale_positive() {
        let mut map = map_with_one();
        let mut opt = AdamOptimizer::new(&map, LearningRates::default());
        let mut grads = ParamGrads::zeros(&map);
        grads.position[0] = Vector3::new(1.0, 0.0, 0.0);
        grads.scale[0] = Vector3::new(100.0, 0.0, 0.0);
        grads.sh[0][0] = [1.0, 0.0, 0.0];
        let before = map.get_slot(0).unwrap().clone();
        let updated = opt.step(&mut map, &grads, &[0], &Pose::identity());
        let after = map.get_slot(0).unwrap();
        assert_eq!(updated, vec![0]);
        assert!(after.position.x < before.position.x);
        assert!(after.scale.x < before.scale.x);
        assert!(after.scale.x > 0.0);
        assert!(after.sh[0][0] < before.sh[0][0]);
        assert!((after.rotation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_gaussian_is_bit_identical() {
        let mut map = map_with_one();
        let mut opt = AdamOptimizer::new(&map, LearningRates::default());
        let grads = ParamGrads::zeros(&map);
        let before = map.get_slot(0).unwrap().clone();
        let updated = opt.step(&mut map, &grads, &[0], &Pose::identity());
        assert!(updated.is_empty());
        assert_eq!(*map.get_slot(0).unwrap(), before);
    }

    #[test]
    fn zero_position_lr_freezes_position_exactly() {
        let mut map = map_with_one();
        let lrs = LearningRates::default().with_position(0.0);
        let mut opt = AdamOptimizer::new(&map, lrs);
        let mut grads = ParamGrads::zeros(&map);
        grads.position[0] = Vector3::new(5.0, -3.0, 2.0);
        grads.sh[0][0] = [0.1, 0.0, 0.0];
        let before = map.get_slot(0).unwrap().position;
        opt.step(&mut map, &grads, &[0], &Pose::identity());
        let after = map.get_slot(0).unwrap().position;
        assert_eq!(before, after);
    }
}
