use splatrec_core::dataset::load_synthetic_sequence;
use splatrec_core::mapping::*;
use splatrec_core::pipeline::frame_global_maps;
use splatrec_core::preproc::*;
use splatrec_core::render::{render_forward, RenderOptions};
use splatrec_core::scene::*;
use splatrec_core::tracking::*;
use splatrec_core::types::*;
use nalgebra::Vector3;
use rand_chacha::rand_core::SeedableRng;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec { frames: 100, ..Default::default() };
    generate_scene(&spec, dir.path()).unwrap();
    let seq = load_synthetic_sequence(dir.path()).unwrap();
    let k = seq.intrinsics;
    let gt = seq.ground_truth.clone().unwrap();
    let (pose0, pose1) = (gt[0].1, gt[1].1);
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
    let lvl = &model.levels[0];

    // Current frame 1 at TRUE pose: classify gated correspondences by model
    // normal direction and report mean signed residual per class.
    let frame1 = seq.load_frame(1).unwrap();
    let mut cur = backproject(&frame1.depth, &k).unwrap();
    compute_normals(&mut cur);
    let inv = pose0.inverse();
    let cos_gate = 30f64.to_radians().cos();
    let mut stats: std::collections::BTreeMap<&str, (f64, f64, usize)> = std::collections::BTreeMap::new();
    for y in 0..k.height {
        for x in 0..k.width {
            if !cur.validity.get(x, y) { continue; }
            let v_g = pose1.apply(cur.vertices.get(x, y));
            let mc = inv.apply(v_g);
            if mc.z <= 0.0 { continue; }
            let (u, v) = k.project(mc);
            if u < 0.0 || v < 0.0 { continue; }
            let (ux, uy) = (u as usize, v as usize);
            if ux >= k.width || uy >= k.height || !lvl.validity.get(ux, uy) { continue; }
            let m_v = lvl.vertices_global.get(ux, uy);
            if (v_g - m_v).norm() > 0.1 { continue; }
            let m_n = lvl.normals.get(ux, uy);
            if (pose1.rotation * cur.normals.get(x, y)).dot(&m_n) < cos_gate { continue; }
            let r = (v_g - m_v).dot(&m_n);
            let class = if m_n.z.abs() > 0.7 { "floor/top" } else if m_n.z.abs() < 0.3 { "vertical" } else { "slanted" };
            let e = stats.entry(class).or_insert((0.0, 0.0, 0));
            e.0 += r; e.1 += r.abs(); e.2 += 1;
        }
    }
    for (class, (sum, asum, n)) in stats {
        println!("{class}: n {} mean signed {:+.6} mean abs {:.6}", n, sum / n as f64, asum / n as f64);
    }
    let _: Vector3<f64> = Vector3::zeros();
}
