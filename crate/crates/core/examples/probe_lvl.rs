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
    let scene = generate_scene(&spec, dir.path()).unwrap();
    let seq = load_synthetic_sequence(dir.path()).unwrap();
    let k = seq.intrinsics;
    let gt = seq.ground_truth.clone().unwrap();
    let pose0 = gt[0].1;
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
    for level in 0..3 {
        let lk = k.level(level);
        // Analytic reference at level intrinsics.
        let (_, dref) = render_scene_view(&scene, &lk, &pose0);
        let lvl = &model.levels[level];
        let mut errs: Vec<f64> = vec![];
        let mut signed = 0.0;
        for y in 0..lk.height { for x in 0..lk.width {
            if !lvl.validity.get(x, y) { continue; }
            // model vertex global → camera depth
            let cam = pose0.inverse().apply(lvl.vertices_global.get(x, y));
            let t = dref.get(x, y);
            if t <= 0.0 { continue; }
            let e = cam.z - t;
            errs.push(e.abs());
            signed += e;
        }}
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        println!("level {}: n {} mean signed {:+.5} med {:.5} p90 {:.5} p99 {:.5}",
            level, errs.len(), signed / errs.len() as f64, errs[errs.len()/2],
            errs[(errs.len() as f64*0.9) as usize], errs[(errs.len() as f64*0.99) as usize]);
    }

    // Trace level 1 from a slightly-off init.
    let pose1 = gt[1].1;
    let frame1 = seq.load_frame(1).unwrap();
    let pyr1 = build_pyramid(&frame1.depth, &k, 3).unwrap();
    let near = splatrec_core::se3::se3_exp(nalgebra::Vector6::new(0.006, -0.004, 0.005, 0.0, 0.0, 0.0)).compose(&pose1);
    println!("tracing level 1 from 0.9 cm init:");
    let cfg1 = IcpConfig::default();
    let end = icp_trace(&pyr1.levels[1], &model.levels[1], &pose0, &near, &cfg1, 8);
    println!("end terr {:.4}", (end.translation - pose1.translation).norm());
    println!("tracing level 0 from same init:");
    let end = icp_trace(&pyr1.levels[0], &model.levels[0], &pose0, &near, &cfg1, 8);
    println!("end terr {:.4}", (end.translation - pose1.translation).norm());
}
