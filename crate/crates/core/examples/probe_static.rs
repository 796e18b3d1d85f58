use splatrec_core::dataset::load_synthetic_sequence;
use splatrec_core::pipeline::{run_slam, SlamConfig};
use splatrec_core::scene::*;
fn main() {
    for (label, geometry, clutter, frames) in [
        ("static multiplane", SceneGeometry::MultiPlane, 0usize, 10usize),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            geometry, texture: TextureKind::Noise { cell: 0.5 },
            trajectory: TrajectoryKind::Static,
            width: 160, height: 120, focal: 140.0, frames, seed: 11, depth_scale: 1000.0, clutter,
        };
        generate_scene(&spec, dir.path()).unwrap();
        let seq = load_synthetic_sequence(dir.path()).unwrap();
        let mut config = SlamConfig { seed: 1, ..Default::default() };
        if std::env::var("NO_ROT").is_ok() { config.mapping.learning_rates.rotation = 0.0; }
        if let Ok(h) = std::env::var("HUBER") { config.icp.huber_delta = h.parse().unwrap(); }
        if std::env::var("NO_SCALE").is_ok() { config.mapping.learning_rates.scale = 0.0; }
        let out = run_slam(&seq, &config, None).unwrap();
        println!("{label}: ATE {:?} psnr {:.2} ratio {:.4}", out.report.final_metrics.ate_cm,
            out.report.final_metrics.mean_psnr_db, out.report.final_metrics.mean_depth_ratio);
        for ((_, p), f) in out.trajectory.iter().zip(&out.report.frames) {
            println!("  f{} t=({:+.5},{:+.5},{:+.5}) res={:?}", f.frame_index,
                p.translation.x, p.translation.y, p.translation.z,
                f.icp.as_ref().map(|d| format!("{:.1e}", d.mean_residual)));
        }
    }
}
