use approx::assert_relative_eq;
use nalgebra::{Vector2, Vector3};

use super::*;
use crate::math::quat_identity;
use crate::types::Gaussian;

fn camera(w: usize, h: usize, f: f64) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: w as f64 / 2.0 + 0.5,
        cy: h as f64 / 2.0 + 0.5,
        width: w,
        height: h,
        depth_scale: 1000.0,
    }
}

fn disc(position: Vector3<f64>, s1: f64, color: [f64; 3]) -> Gaussian {
    Gaussian::new_opaque(
        position,
        Vector3::new(s1, s1, 0.1 * s1),
        quat_identity(),
        color,
        2,
        0,
    )
}

#[test]
fn projection_of_axis_disc_matches_pinhole_jacobian() {
    let k = camera(128, 128, 500.0);
    let g = Gaussian::new_opaque(
        Vector3::new(0.0, 0.0, 2.0),
        Vector3::new(0.1, 0.1, 0.01),
        quat_identity(),
        [0.5; 3],
        2,
        0,
    );
    let p = project_gaussian(&g, GaussianId { slot: 0, generation: 0 }, &Pose::identity(), &k, 2)
        .expect("visible");
    assert_relative_eq!(p.mean2d, Vector2::new(k.cx, k.cy), epsilon = 1e-12);
    assert_relative_eq!(p.cov2d[(0, 0)], 625.3, epsilon = 1e-9);
    assert_relative_eq!(p.cov2d[(1, 1)], 625.3, epsilon = 1e-9);
    assert_relative_eq!(p.cov2d[(0, 1)], 0.0, epsilon = 1e-9);
    assert_relative_eq!(p.view_depth, 2.0, epsilon = 1e-12);
}

#[test]
fn projection_culls_behind_camera() {
    let k = camera(64, 64, 300.0);
    let g = disc(Vector3::new(0.0, 0.0, -1.0), 0.1, [0.5; 3]);
    assert!(project_gaussian(&g, GaussianId::NONE, &Pose::identity(), &k, 2).is_none());
}

#[test]
fn projection_is_rigid_invariant() {
    let k = camera(64, 64, 300.0);
    let g = disc(Vector3::new(0.2, -0.1, 1.5), 0.05, [0.5; 3]);
    let p0 = project_gaussian(&g, GaussianId::NONE, &Pose::identity(), &k, 2).unwrap();

    let shift = Vector3::new(3.0, -2.0, 1.0);
    let mut g2 = g.clone();
    g2.position += shift;
    let pose = Pose::new(nalgebra::Matrix3::identity(), shift);
    let p1 = project_gaussian(&g2, GaussianId::NONE, &pose, &k, 2).unwrap();
    assert_relative_eq!(p0.mean2d, p1.mean2d, epsilon = 1e-9);
    assert_relative_eq!(p0.cov2d, p1.cov2d, epsilon = 1e-9);
    assert_relative_eq!(p0.view_depth, p1.view_depth, epsilon = 1e-9);
}

#[test]
fn binning_single_gaussian_single_tile() {
    let k = camera(64, 64, 300.0);
    // Mean at (40.5, 40.5): the tiny footprint stays inside tile (2,2).
    let g = disc(Vector3::new(8.0 / 300.0 * 2.0, 8.0 / 300.0 * 2.0, 2.0), 0.002, [0.5; 3]);
    let p = project_gaussian(&g, GaussianId::NONE, &Pose::identity(), &k, 2).unwrap();
    let bins = bin_and_sort(&[p], 64, 64, TILE_SIZE);
    let nonempty: Vec<_> = bins.lists.iter().filter(|l| !l.is_empty()).collect();
    assert_eq!(nonempty.len(), 1);
    assert_eq!(nonempty[0].len(), 1);
}

#[test]
fn binning_sorts_front_to_back() {
    let k = camera(64, 64, 300.0);
    let near = disc(Vector3::new(0.0, 0.0, 1.0), 0.002, [0.5; 3]);
    let far = disc(Vector3::new(0.0, 0.0, 2.0), 0.004, [0.5; 3]);
    // Insert far first so sorting has to reorder.
    let pf = project_gaussian(&far, GaussianId { slot: 0, generation: 0 }, &Pose::identity(), &k, 2)
        .unwrap();
    let pn = project_gaussian(&near, GaussianId { slot: 1, generation: 0 }, &Pose::identity(), &k, 2)
        .unwrap();
    let bins = bin_and_sort(&[pf, pn], 64, 64, TILE_SIZE);
    let list = bins.lists.iter().find(|l| l.len() == 2).expect("shared tile");
    assert_eq!(list.as_slice(), &[1, 0], "near (index 1) sorts first");
}

#[test]
fn binning_covers_every_tile_the_aabb_overlaps() {
    // Place the footprint so its AABB spans exactly 2x2 tiles around (16,16).
    let k = camera(64, 64, 300.0);
    let mut p = project_gaussian(
        &disc(Vector3::new(0.0, 0.0, 2.0), 0.01, [0.5; 3]),
        GaussianId::NONE,
        &Pose::identity(),
        &k,
        2,
    )
    .unwrap();
    p.mean2d = Vector2::new(16.0, 16.0);
    p.aabb_min = Vector2::new(10.0, 10.0);
    p.aabb_max = Vector2::new(20.0, 20.0);
    let bins = bin_and_sort(&[p], 64, 64, TILE_SIZE);
    // Independent AABB-overlap oracle over all tiles.
    for ty in 0..bins.tiles_y {
        for tx in 0..bins.tiles_x {
            let overlaps = (10.0f64 / 16.0).floor() as usize <= tx
                && tx <= (20.0f64 / 16.0).floor() as usize
                && (10.0f64 / 16.0).floor() as usize <= ty
                && ty <= (20.0f64 / 16.0).floor() as usize;
            let has = !bins.lists[ty * bins.tiles_x + tx].is_empty();
            assert_eq!(has, overlaps, "tile ({tx},{ty})");
        }
    }
    let count: usize = bins.lists.iter().map(|l| l.len()).sum();
    assert_eq!(count, 4);
}

#[test]
fn active_tiles_boundary_is_inclusive() {
    let mut mask = Grid::new(32, 32, false);
    // Tile (0,0): 127 of 256 active → discarded. Tile (1,0): 128 → kept.
    let mut n = 0;
    'outer: for y in 0..16 {
        for x in 0..16 {
            if n == 127 {
                break 'outer;
            }
            mask.set(x, y, true);
            n += 1;
        }
    }
    let mut n = 0;
    'outer2: for y in 0..16 {
        for x in 16..32 {
            if n == 128 {
                break 'outer2;
            }
            mask.set(x, y, true);
            n += 1;
        }
    }
    let tiles = active_tiles(&mask, 16, 0.5);
    assert!(!tiles.get(0, 0), "127/256 discarded");
    assert!(tiles.get(1, 0), "128/256 kept");
    assert!(!tiles.get(0, 1));

    let all = active_tiles(&Grid::new(32, 32, true), 16, 0.5);
    assert!(all.data().iter().all(|v| *v));
    let none = active_tiles(&Grid::new(32, 32, false), 16, 0.5);
    assert!(none.data().iter().all(|v| !*v));
}

#[test]
fn forward_empty_map_is_sentinel() {
    let k = camera(32, 32, 200.0);
    let map = GaussianMap::new(2);
    let buffers = render_forward(&map, &Pose::identity(), &k, &RenderOptions::default());
    for (_, _, c) in buffers.color.pixels() {
        assert_eq!(*c, [0.0; 3]);
    }
    for (_, _, t) in buffers.transmission.pixels() {
        assert_eq!(*t, 1.0);
    }
    for (_, _, d) in buffers.depth.pixels() {
        assert_eq!(*d, DEPTH_NO_HIT);
    }
    buffers.validate().unwrap();
}

#[test]
fn forward_fronto_parallel_disc_depth_is_exact() {
    let k = camera(64, 64, 500.0);
    let mut map = GaussianMap::new(2);
    let color = [0.8, 0.4, 0.2];
    map.insert(disc(Vector3::new(0.0, 0.0, 2.0), 0.5, color));
    let buffers = render_forward(&map, &Pose::identity(), &k, &RenderOptions::default());
    // Principal pixel: f = α at the center, hit, depth exactly 2.
    let (cx, cy) = (32, 32);
    assert_relative_eq!(buffers.depth.get(cx, cy), 2.0, epsilon = 1e-12);
    for c in 0..3 {
        assert_relative_eq!(buffers.color.get(cx, cy)[c], 0.99 * color[c], epsilon = 1e-9);
    }
    assert_relative_eq!(buffers.transmission.get(cx, cy), 0.01, epsilon = 1e-12);
    assert!(!buffers.index.get(cx, cy).is_none());
    assert_relative_eq!(
        buffers.normal.get(cx, cy),
        Vector3::new(0.0, 0.0, -1.0),
        epsilon = 1e-12
    );
    buffers.validate().unwrap();
}

#[test]
fn forward_transparent_does_not_affect_depth() {
    let k = camera(64, 64, 500.0);
    let mut map = GaussianMap::new(2);
    let c_opaque = [0.0, 1.0, 0.0];
    let c_trans = [1.0, 0.0, 0.0];
    map.insert(disc(Vector3::new(0.0, 0.0, 2.0), 0.5, c_opaque));
    map.insert(Gaussian::new_transparent(
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(0.05, 0.05, 0.005),
        quat_identity(),
        c_trans,
        2,
        0,
    ));
    let buffers = render_forward(&map, &Pose::identity(), &k, &RenderOptions::default());
    let (cx, cy) = (32, 32);
    // Depth comes from the opaque disc behind the transparent one.
    assert_relative_eq!(buffers.depth.get(cx, cy), 2.0, epsilon = 1e-12);
    // Color blends both: 0.1·red + 0.9·0.99·green.
    let c = buffers.color.get(cx, cy);
    assert_relative_eq!(c[0], 0.1, epsilon = 1e-9);
    assert_relative_eq!(c[1], 0.9 * 0.99, epsilon = 1e-9);
    let id = buffers.index.get(cx, cy);
    assert_eq!(id.slot, 0, "index map references the opaque hit");
}

#[test]
fn forward_respects_active_mask_and_tile_discard() {
    let k = camera(64, 64, 500.0);
    let mut map = GaussianMap::new(2);
    map.insert(disc(Vector3::new(0.0, 0.0, 2.0), 0.5, [1.0; 3]));
    // Only a single pixel active: its tile has 1/256 active → discarded.
    let mut mask = Grid::new(64, 64, false);
    mask.set(32, 32, true);
    let options = RenderOptions { active_pixel_mask: Some(mask), ..Default::default() };
    let buffers = render_forward(&map, &Pose::identity(), &k, &options);
    assert_eq!(buffers.depth.get(32, 32), DEPTH_NO_HIT, "discarded tile renders sentinel");

    // With keep_fraction 0 the tile survives and the pixel renders.
    let mut mask = Grid::new(64, 64, false);
    mask.set(32, 32, true);
    let options = RenderOptions {
        active_pixel_mask: Some(mask),
        tile_keep_fraction: 0.0,
        ..Default::default()
    };
    let buffers = render_forward(&map, &Pose::identity(), &k, &options);
    assert_relative_eq!(buffers.depth.get(32, 32), 2.0, epsilon = 1e-12);
    assert_eq!(buffers.depth.get(33, 32), DEPTH_NO_HIT, "inactive pixel stays sentinel");
}

#[test]
fn transmission_subset_masks_unstable_pixels() {
    let k = camera(64, 64, 500.0);
    let mut map = GaussianMap::new(2);
    let stable_id = map.insert(disc(Vector3::new(-0.5, 0.0, 2.0), 0.2, [1.0; 3]));
    map.insert(disc(Vector3::new(0.5, 0.0, 2.0), 0.2, [1.0; 3]));
    map.get_slot_mut(stable_id.slot).unwrap().state = GaussianState::Stable;

    let t_unstable = render_transmission(&map, &Pose::identity(), &k, RenderSubset::UnstableOnly);
    let t_all = render_transmission(&map, &Pose::identity(), &k, RenderSubset::All);
    // The unstable disc sits right of center: its pixels have T < 1.
    let right = k.project(Vector3::new(0.5, 0.0, 2.0));
    let left = k.project(Vector3::new(-0.5, 0.0, 2.0));
    assert!(t_unstable.get(right.0 as usize, right.1 as usize) < 1.0);
    assert_eq!(t_unstable.get(left.0 as usize, left.1 as usize), 1.0);
    assert!(t_all.get(left.0 as usize, left.1 as usize) < 1.0);
}

#[test]
fn alpha_blend_depth_mode_blends_center_depths() {
    let k = camera(64, 64, 500.0);
    let mut map = GaussianMap::new(2);
    map.insert(disc(Vector3::new(0.0, 0.0, 2.0), 0.5, [1.0; 3]));
    let options = RenderOptions { depth_mode: DepthMode::AlphaBlend, ..Default::default() };
    let buffers = render_forward(&map, &Pose::identity(), &k, &options);
    // Single Gaussian: blended depth at center = 0.99 · 2.0.
    assert_relative_eq!(buffers.depth.get(32, 32), 0.99 * 2.0, epsilon = 1e-12);
}

#[test]
fn backward_zero_cotangents_give_zero_grads() {
    let k = camera(32, 32, 200.0);
    let mut map = GaussianMap::new(2);
    map.insert(disc(Vector3::new(0.0, 0.0, 1.5), 0.3, [0.5; 3]));
    let options = RenderOptions::default();
    let buffers = render_forward(&map, &Pose::identity(), &k, &options);
    let grads = render_backward(
        &map,
        &Pose::identity(),
        &k,
        &options,
        &buffers,
        &Grid::new(32, 32, [0.0; 3]),
        &Grid::new(32, 32, 0.0),
    )
    .unwrap();
    assert!(grads.position.iter().all(|v| *v == Vector3::zeros()));
    assert!(grads.scale.iter().all(|v| *v == Vector3::zeros()));
    assert!(!grads.sh_nonzero(0));
}

#[test]
fn backward_depth_cotangent_moves_position_along_view() {
    // Fronto-parallel disc, dL/dD̂(center) = 1 → dL/dp = (0,0,1) in camera axes.
    let k = camera(64, 64, 500.0);
    let mut map = GaussianMap::new(2);
    map.insert(disc(Vector3::new(0.0, 0.0, 2.0), 0.5, [0.5; 3]));
    let options = RenderOptions::default();
    let buffers = render_forward(&map, &Pose::identity(), &k, &options);
    let mut d_depth = Grid::new(64, 64, 0.0);
    d_depth.set(32, 32, 1.0);
    let grads = render_backward(
        &map,
        &Pose::identity(),
        &k,
        &options,
        &buffers,
        &Grid::new(64, 64, [0.0; 3]),
        &d_depth,
    )
    .unwrap();
    assert_relative_eq!(grads.position[0], Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-9);
}

#[test]
fn backward_rejects_stale_buffers() {
    let k = camera(32, 32, 200.0);
    let mut map = GaussianMap::new(2);
    map.insert(disc(Vector3::new(0.0, 0.0, 1.5), 0.3, [0.5; 3]));
    let options = RenderOptions::default();
    let buffers = render_forward(&map, &Pose::identity(), &k, &options);
    map.insert(disc(Vector3::new(0.1, 0.0, 1.5), 0.3, [0.5; 3]));
    let err = render_backward(
        &map,
        &Pose::identity(),
        &k,
        &options,
        &buffers,
        &Grid::new(32, 32, [0.0; 3]),
        &Grid::new(32, 32, 0.0),
    );
    assert!(matches!(err, Err(crate::error::Error::StaleSnapshot { .. })));
}

#[test]
fn backward_unstable_only_zeroes_stable_gradients() {
    let k = camera(64, 64, 500.0);
    let mut map = GaussianMap::new(2);
    let a = map.insert(disc(Vector3::new(-0.3, 0.0, 2.0), 0.3, [0.5; 3]));
    map.insert(disc(Vector3::new(0.3, 0.0, 2.0), 0.3, [0.5; 3]));
    map.get_slot_mut(a.slot).unwrap().state = GaussianState::Stable;
    let options = RenderOptions { grad_unstable_only: true, ..Default::default() };
    let buffers = render_forward(&map, &Pose::identity(), &k, &options);
    let d_color = Grid::new(64, 64, [1.0, 0.0, 0.0]);
    let grads = render_backward(
        &map,
        &Pose::identity(),
        &k,
        &options,
        &buffers,
        &d_color,
        &Grid::new(64, 64, 0.0),
    )
    .unwrap();
    assert_eq!(grads.position[a.slot as usize], Vector3::zeros());
    assert!(!grads.sh_nonzero(a.slot));
    assert!(grads.sh_nonzero(1));
}

#[test]
fn forward_is_deterministic_across_thread_counts() {
    let k = camera(64, 64, 300.0);
    let mut map = GaussianMap::new(2);
    for i in 0..40 {
        let t = i as f64 * 0.13;
        map.insert(disc(
            Vector3::new(t.sin() * 0.4, t.cos() * 0.3, 1.5 + 0.01 * i as f64),
            0.05 + 0.002 * i as f64,
            [0.1 * (i % 10) as f64, 0.5, 0.3],
        ));
    }
    let options = RenderOptions::default();
    let reference = render_forward(&map, &Pose::identity(), &k, &options);
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| render_forward(&map, &Pose::identity(), &k, &options));
    assert_eq!(reference.color, single.color, "bit-identical color across pools");
    assert_eq!(reference.depth, single.depth);
    assert_eq!(reference.transmission, single.transmission);
}
