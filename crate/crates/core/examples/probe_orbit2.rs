use splatrec_core::dataset::load_synthetic_sequence;
use splatrec_core::pipeline::{run_slam, SlamConfig};
use splatrec_core::scene::*;

fn main() {
    let frames: usize = std::env::var("FRAMES").map(|v| v.parse().unwrap()).unwrap_or(16);
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { frames: 100, ..Default::default() };
    generate_scene(&spec, dir.path()).unwrap();
    let mut seq = load_synthetic_sequence(dir.path()).unwrap();
    seq.frames.truncate(frames);
    if let Some(gt) = seq.ground_truth.as_mut() { gt.truncate(frames); }
    let config = SlamConfig { seed: 9, frame0_pose_from_gt: true, ..Default::default() };
    let out = run_slam(&seq, &config, None).unwrap();
    let gt = seq.ground_truth.as_ref().unwrap();
    for (i, f) in out.report.frames.iter().enumerate() {
        let est = out.trajectory[i].1;
        println!("f{:2} lost={} inl={:?} res={:?} terr={:.4} rerr={:.2}° add={}({}t) G={} S={}",
            i, f.tracking_lost, f.icp.as_ref().map(|d| d.inliers),
            f.icp.as_ref().map(|d| format!("{:.1e}", d.mean_residual)),
            (est.translation - gt[i].1.translation).norm(),
            est.rotation_angle_to(&gt[i].1).to_degrees(),
            f.added_opaque + f.added_transparent, f.added_transparent,
            f.gaussians_total, f.gaussians_stable);
    }
}
