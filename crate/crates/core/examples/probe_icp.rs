use splatrec_core::dataset::load_synthetic_sequence;
use splatrec_core::mapping::*;
use splatrec_core::pipeline::frame_global_maps;
use splatrec_core::preproc::*;
use splatrec_core::render::{render_forward, RenderOptions};
use splatrec_core::scene::*;
use splatrec_core::tracking::*;
use splatrec_core::types::*;
use rand_chacha::rand_core::SeedableRng;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { frames: 100, ..Default::default() };
    generate_scene(&spec, dir.path()).unwrap();
    let seq = load_synthetic_sequence(dir.path()).unwrap();
    let k = seq.intrinsics;
    let gt = seq.ground_truth.clone().unwrap();
    let (pose0, pose1) = (gt[0].1, gt[1].1);

    // Build the frame-0 map exactly like the pipeline.
    let frame0 = seq.load_frame(0).unwrap();
    let mut map = GaussianMap::new(2);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let cfg = MappingConfig::default();
    let rendered = render_forward(&map, &pose0, &k, &RenderOptions::default());
    let masks = compute_add_masks(&rendered, &frame0, &cfg).unwrap();
    let gs = sample_mask(&masks.geometry, 0.05, &mut rng);
    let maps0 = frame_global_maps(&frame0, &k, &pose0).unwrap();
    add_gaussians(&mut map, &gs, &[], &maps0, &frame0, &rendered.index, &k, pose0.translation, 4.47, 0);

    let model = render_model_views(&map, &pose0, &k, 3);
    for (li, lvl) in model.levels.iter().enumerate() {
        println!("model level {li}: {}x{} valid {}", lvl.intrinsics.width, lvl.intrinsics.height, lvl.validity.count_true());
    }
    let frame1 = seq.load_frame(1).unwrap();
    let pyr1 = build_pyramid(&frame1.depth, &k, 3).unwrap();
    for (li, lvl) in pyr1.levels.iter().enumerate() {
        println!("frame1 level {li}: valid {}", lvl.maps.validity.count_true());
    }
    // One GN step from the TRUE pose: a biased model shows up as nonzero xi.
    {
        let icp = IcpConfig { levels: 1, iterations: vec![1], min_inliers: 50, ..Default::default() };
        let m = ModelViews { levels: vec![model.levels[0].clone()], pose: pose0 };
        let p = FramePyramid { levels: vec![pyr1.levels[0].clone()] };
        match icp_track(&p, &m, &pose1, &icp) {
            Ok((pose, d)) => println!("from-true 1 step: moved {:.5} m rot {:.4}° res {:.2e} inl {}",
                (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.mean_residual, d.inliers),
            Err(e) => println!("from-true: {e}"),
        }
        let icp = IcpConfig { levels: 1, iterations: vec![12], min_inliers: 50, ..Default::default() };
        match icp_track(&p, &m, &pose1, &icp) {
            Ok((pose, d)) => println!("from-true 12 steps: moved {:.5} m rot {:.4}° res {:.2e} inl {}",
                (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.mean_residual, d.inliers),
            Err(e) => println!("from-true: {e}"),
        }
    }
    // Track with single-level configs to see each level's behavior.
    for levels in [1usize] {
        for only_level in 0..3 {
            let m = ModelViews { levels: vec![model.levels[only_level].clone()], pose: pose0 };
            let p = FramePyramid { levels: vec![pyr1.levels[only_level].clone()] };
            let icp = IcpConfig { levels, iterations: vec![12], min_inliers: 50, ..Default::default() };
            match icp_track(&p, &m, &pose0, &icp) {
                Ok((pose, d)) => println!("level {}: terr {:.4} rerr {:.3} inl {} res {:.2e}", only_level,
                    (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.inliers, d.mean_residual),
                Err(e) => println!("level {}: {e}", only_level),
            }
        }
    }
    // Cascade from true pose, and level behavior from near-true inits.
    match icp_track(&pyr1, &model, &pose1, &IcpConfig::default()) {
        Ok((pose, d)) => println!("full-from-true: terr {:.4} rerr {:.3} res {:.2e}",
            (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.mean_residual),
        Err(e) => println!("full-from-true: {e}"),
    }
    {
        use splatrec_core::se3::se3_exp;
        let near = se3_exp(nalgebra::Vector6::new(0.006, -0.004, 0.005, 0.0, 0.0, 0.0)).compose(&pose1);
        for only_level in 0..3 {
            let m = ModelViews { levels: vec![model.levels[only_level].clone()], pose: pose0 };
            let p = FramePyramid { levels: vec![pyr1.levels[only_level].clone()] };
            let icp = IcpConfig { levels: 1, iterations: vec![12], min_inliers: 50, ..Default::default() };
            match icp_track(&p, &m, &near, &icp) {
                Ok((pose, d)) => println!("level {} from 0.9cm: terr {:.4} rerr {:.3} res {:.2e}", only_level,
                    (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.mean_residual),
                Err(e) => println!("level {}: {e}", only_level),
            }
        }
    }
    // Same rendered depth, normals recomputed from the depth map itself:
    {
        let mb = render_forward(&map, &pose0, &k, &RenderOptions::default());
        let mut m0 = backproject(&mb.depth, &k).unwrap();
        compute_normals(&mut m0);
        let wn = m0.normals.map(|n| pose0.rotation * n);
        let lvl = build_model_level(&mb.depth, &wn, &k, &pose0);
        let m = ModelViews { levels: vec![lvl], pose: pose0 };
        let p = FramePyramid { levels: vec![pyr1.levels[0].clone()] };
        let icp = IcpConfig { levels: 1, iterations: vec![12], min_inliers: 50, ..Default::default() };
        match icp_track(&p, &m, &pose0, &icp) {
            Ok((pose, d)) => println!("depth-normals model: terr {:.4} rerr {:.3} res {:.2e} inl {}",
                (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.mean_residual, d.inliers),
            Err(e) => println!("depth-normals model: {e}"),
        }
        // and gaussian normals for comparison at level 0 only:
        let m2 = ModelViews { levels: vec![model.levels[0].clone()], pose: pose0 };
        match icp_track(&p, &m2, &pose0, &icp) {
            Ok((pose, d)) => println!("gaussian-normals model: terr {:.4} rerr {:.3} res {:.2e} inl {}",
                (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.mean_residual, d.inliers),
            Err(e) => println!("gaussian-normals model: {e}"),
        }
    }
    // And full multi-level:
    match icp_track(&pyr1, &model, &pose0, &IcpConfig::default()) {
        Ok((pose, d)) => println!("full: terr {:.4} rerr {:.3} inl {} res {:.2e}",
            (pose.translation - pose1.translation).norm(), pose.rotation_angle_to(&pose1).to_degrees(), d.inliers, d.mean_residual),
        Err(e) => println!("full: {e}"),
    }
}
