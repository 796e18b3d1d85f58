use splatrec_core::dataset::load_synthetic_sequence;
use splatrec_core::pipeline::{run_slam, SlamConfig};
use splatrec_core::scene::*;
use std::time::Instant;

fn main() {
    let frames: usize = std::env::var("FRAMES").map(|v| v.parse().unwrap()).unwrap_or(100);
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { frames, ..Default::default() };
    generate_scene(&spec, dir.path()).unwrap();
    let seq = load_synthetic_sequence(dir.path()).unwrap();
    let config = SlamConfig { seed: 9, ..Default::default() };
    let t0 = Instant::now();
    let out = run_slam(&seq, &config, None).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    let r = &out.report;
    println!("run: {:.1}s ({:.2}s/frame)", wall, wall / frames as f64);
    println!("ATE {:?} cm, psnr {:.2} dB, ratio {:.4}", r.final_metrics.ate_cm, r.final_metrics.mean_psnr_db, r.final_metrics.mean_depth_ratio);
    println!("G {} (S {} / U {}), kf {}, lost {}", r.final_gaussians, r.final_stable, r.final_unstable, r.keyframes, r.tracking_lost_frames);
    for f in r.frames.iter().step_by((frames/10).max(1)) {
        println!("f{:3}: track {:.2}s map {:.2}s G {} (S {}) inl {:?}", f.frame_index, f.track_seconds, f.map_seconds, f.gaussians_total, f.gaussians_stable, f.icp.as_ref().map(|d| d.inliers));
    }
}
