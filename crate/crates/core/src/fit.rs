//! Single-frame Gaussian fitting: initialize a fixed budget of discs from
//! uniformly sampled pixels and optimize them against one RGBD frame.
//! Supports the compact disc-intersection depth and the alpha-blended depth
//! ablation, with identical losses.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::{compute_loss_and_grads, LossWeights};
use crate::mapping::{add_gaussians, sample_mask};
use crate::metrics::{depth_accuracy_ratio, psnr};
use crate::optimizer::{AdamOptimizer, LearningRates};
use crate::preproc::{backproject, compute_normals, depth_valid};
use crate::render::{render_forward, DepthMode, RenderOptions};
use crate::se3::Pose;
use crate::types::{CameraIntrinsics, GaussianId, GaussianMap, RgbdFrame, DEPTH_NO_HIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FitMode {
    Compact,
    AlphaBlendDepth,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub weights: LossWeights,
    pub seed: u64,
    /// Depth accuracy tolerance for reporting, meters.
    pub tau: f64,
    pub sh_degree: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rates: LearningRates::default(),
            weights: LossWeights::default(),
            seed: 0,
            tau: 0.01,
            sh_degree: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub mode: FitMode,
    pub gaussians: usize,
    pub depth_ratio: f64,
    pub psnr_db: f64,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Fit `count` Gaussians to one frame and report depth accuracy and PSNR.
/// Optionally writes error heatmaps (`depth_error.png`, `color_error.png`)
/// plus the final renders into `out_dir`.
pub fn fit_frame(
    frame: &RgbdFrame,
    k: &CameraIntrinsics,
    count: usize,
    mode: FitMode,
    cfg: &FitConfig,
    out_dir: Option<&std::path::Path>,
) -> Result<FitReport> {
    if count < 1 {
        return Err(Error::InvalidParameter("gaussian count must be ≥ 1".into()));
    }
    frame.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Initialize from uniformly sampled valid pixels (with usable normals).
    let mut maps = backproject(&frame.depth, k)?;
    compute_normals(&mut maps);
    let ratio = (count as f64 / maps.validity.count_true().max(1) as f64).min(1.0);
    let mut samples = sample_mask(&maps.validity, ratio, &mut rng);
    samples.truncate(count);
    if samples.is_empty() {
        return Err(Error::InvalidInput("no valid pixels to initialize from".into()));
    }

    let mut map = GaussianMap::new(cfg.sh_degree);
    let no_hits = Grid::new(k.width, k.height, GaussianId::NONE);
    let sample_stride = (maps.validity.count_true() as f64 / samples.len() as f64).sqrt();
    add_gaussians(
        &mut map,
        &samples,
        &[],
        &maps,
        frame,
        &no_hits,
        k,
        nalgebra::Vector3::zeros(),
        sample_stride,
        0,
    );

    let depth_mode = match mode {
        FitMode::Compact => DepthMode::DiscIntersection,
        FitMode::AlphaBlendDepth => DepthMode::AlphaBlend,
    };
    let options = RenderOptions { depth_mode, ..Default::default() };
    let pose = Pose::identity();
    let targets: Vec<u32> = map.iter_live().map(|(s, _)| s).collect();
    let mut optimizer = AdamOptimizer::new(&map, cfg.learning_rates);
    let mut first_loss = 0.0;
    let mut final_loss = 0.0;
    for iter in 0..cfg.iterations {
        let (loss, grads, _) =
            compute_loss_and_grads(&map, &pose, k, &options, frame, &cfg.weights);
        optimizer.step(&mut map, &grads, &targets, &pose);
        if iter == 0 {
            first_loss = loss.total;
        }
        final_loss = loss.total;
    }

    let buffers = render_forward(&map, &pose, k, &options);
    let clamped = buffers
        .color
        .map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]);
    let report = FitReport {
        mode,
        gaussians: map.len(),
        depth_ratio: depth_accuracy_ratio(&buffers.depth, &frame.depth, cfg.tau),
        psnr_db: psnr(&clamped, &frame.color),
        first_loss,
        final_loss,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        crate::render::dump_buffers(&buffers, dir, "fit")?;
        write_heatmaps(&buffers.depth, &clamped, frame, dir)?;
    }
    Ok(report)
}

fn write_heatmaps(
    depth: &Grid<f64>,
    color: &Grid<[f64; 3]>,
    frame: &RgbdFrame,
    dir: &std::path::Path,
) -> Result<()> {
    let (w, h) = (frame.width() as u32, frame.height() as u32);
    let mut depth_err = image::GrayImage::new(w, h);
    let mut color_err = image::GrayImage::new(w, h);
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            let de = if depth_valid(frame.depth.get(x, y)) && depth.get(x, y) != DEPTH_NO_HIT {
                (depth.get(x, y) - frame.depth.get(x, y)).abs()
            } else {
                0.0
            };
            // 5 cm saturates the depth error scale.
            depth_err.put_pixel(x as u32, y as u32, image::Luma([((de / 0.05).min(1.0) * 255.0) as u8]));
            let c = color.at(x, y);
            let t = frame.color.at(x, y);
            let ce = ((c[0] - t[0]).abs() + (c[1] - t[1]).abs() + (c[2] - t[2]).abs()) / 3.0;
            color_err.put_pixel(x as u32, y as u32, image::Luma([(ce.min(1.0) * 255.0) as u8]));
        }
    }
    depth_err.save(dir.join("depth_error.png"))?;
    color_err.save(dir.join("color_error.png"))?;
    Ok(())
}
