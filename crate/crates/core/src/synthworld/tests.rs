use super::*;
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::error::Error;
use crate::geometry::{first_hit, pixel_rays, visibility_mask, Camera, CameraRig, GridSpec, SceneBounds};
use crate::gradcheck::{check, random_tensor, readout, FdConfig};
use crate::seeded_rng;

fn counts_zero() -> SceneSpec {
    SceneSpec {
        buildings: 0,
        poles: 0,
        vehicles: 0,
        pedestrians: 0,
        vegetation: 0,
        ..SceneSpec::default()
    }
}

#[test]
fn scenes_are_deterministic() {
    let spec = SceneSpec::default();
    assert_eq!(generate_scene(7, &spec).unwrap(), generate_scene(7, &spec).unwrap());
    assert_ne!(generate_scene(7, &spec).unwrap(), generate_scene(8, &spec).unwrap());
}

#[test]
fn zero_objects_leave_ground_only() {
    let s = generate_scene(3, &counts_zero()).unwrap();
    for i in 0..s.grid.len() {
        let k = s.grid.coords(i)[2];
        assert_eq!(s.labels[i], if k == 0 { SURFACE } else { EMPTY });
    }
}

#[test]
fn seed_42_histogram_is_frozen() {
    let s = generate_scene(42, &SceneSpec::default()).unwrap();
    assert_eq!(class_histogram(&s.labels, NUM_CLASSES), FROZEN_SEED_42);
}

const FROZEN_SEED_42: [u64; 7] = [10929, 1600, 112, 42, 52, 20, 45];

#[test]
fn surface_dominates_every_object_class() {
    for seed in 0..20 {
        let s = generate_scene(seed, &SceneSpec::default()).unwrap();
        let h = class_histogram(&s.labels, NUM_CLASSES);
        for c in 2..=NUM_CLASSES {
            assert!(h[1] > 5 * h[c], "seed {seed}: {h:?}");
        }
        assert!(s.labels.iter().all(|&l| usize::from(l) <= NUM_CLASSES));
    }
}

#[test]
fn ego_area_is_clear() {
    let spec = SceneSpec::default();
    for seed in 0..10 {
        let s = generate_scene(seed, &spec).unwrap();
        for i in 0..s.grid.len() {
            let c = s.grid.center(i);
            if c[0].abs() < 2.0 && c[1].abs() < 2.0 && s.grid.coords(i)[2] > 0 {
                assert_eq!(s.labels[i], EMPTY);
            }
        }
    }
}

#[test]
fn crowded_spec_falls_back_then_fails() {
    let small = SceneSpec {
        grid: GridSpec::with_voxel_size(SceneBounds::new([-5.0, -5.0, -1.5], [5.0, 5.0, 2.5]).unwrap(), 0.5).unwrap(),
        buildings: 10_000,
        ..SceneSpec::default()
    };
    assert!(matches!(generate_scene(1, &small), Err(Error::Data(_))));
    let bad = SceneSpec {
        classes: 4,
        ..SceneSpec::default()
    };
    assert!(matches!(generate_scene(1, &bad), Err(Error::Config(_))));
}

#[test]
fn empty_scene_renders_sky() {
    let grid = SceneSpec::default().grid;
    let scene = VoxelScene::empty(grid);
    for img in render_views(&scene, &CameraRig::default_surround(), NUM_CLASSES) {
        for px in img.data().chunks(NUM_CLASSES + 2) {
            assert_eq!(px[NUM_CLASSES + 1], 1.0);
            assert!(px[..=NUM_CLASSES].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn single_voxel_blob_matches_projection() {
    let grid = GridSpec::new(SceneBounds::new([0.0; 3], [10.0; 3]).unwrap(), [10; 3]).unwrap();
    let mut scene = VoxelScene::empty(grid);
    let target = grid.index([6, 5, 5]);
    scene.labels[target] = VEHICLE;
    let (w, h) = (40, 30);
    let cam = Camera::looking([0.5, 5.5, 5.5], 0.0, 0.0, 1.0, w, h).unwrap();
    let img = render_view(&scene, &cam, NUM_CLASSES);
    // silhouette is the front face at depth 5.5 with half-width 0.5
    let f = cam.k[0][0];
    let half = f * 0.5 / 5.5;
    let inside = |p: f64, c: f64| (p + 0.5 - c).abs() < half;
    let cols = (0..w).filter(|&u| inside(u as f64, cam.k[0][2])).count();
    let rows = (0..h).filter(|&v| inside(v as f64, cam.k[1][2])).count();
    let c = NUM_CLASSES + 2;
    let mut seen = 0;
    for v in 0..h {
        for u in 0..w {
            let px = &img.data()[(v * w + u) * c..][..c];
            let on = px[usize::from(VEHICLE) - 1] == 1.0;
            assert_eq!(on, inside(u as f64, cam.k[0][2]) && inside(v as f64, cam.k[1][2]), "pixel {u},{v}");
            if on {
                seen += 1;
                assert_eq!(px[NUM_CLASSES], f64::from((NEAR_DEPTH / 5.5) as f32));
            }
        }
    }
    assert_eq!(seen, rows * cols);
    assert!(seen > 0);
}

#[test]
fn first_hits_are_visible() {
    let rig = CameraRig::default_surround();
    for seed in 0..3 {
        let s = generate_scene(seed, &SceneSpec::default()).unwrap();
        let vis = visibility_mask(&s.labels, &s.grid, &rig).unwrap();
        for cam in &rig.cameras {
            for (_, dir) in pixel_rays(cam) {
                if let Some((i, _)) = first_hit(&s.grid, &s.labels, cam.center(), dir) {
                    assert!(vis[i]);
                }
            }
        }
    }
}

#[test]
fn one_hot_channels_sum_to_at_most_one() {
    let s = generate_scene(5, &SceneSpec::default()).unwrap();
    for img in render_views(&s, &CameraRig::default_surround(), NUM_CLASSES) {
        for px in img.data().chunks(NUM_CLASSES + 2) {
            let sum: f64 = px[..NUM_CLASSES].iter().sum();
            assert!(sum <= 1.0);
            assert_eq!(sum + px[NUM_CLASSES + 1], 1.0);
        }
    }
}

fn stem_setup(levels: usize, seed: u64) -> (ParamStore, Stem) {
    let mut store = ParamStore::new();
    let cfg = StemConfig {
        in_channels: 3,
        hidden: 4,
        d: 5,
        levels,
    };
    let stem = Stem::init(&mut store, "stem", cfg, &mut seeded_rng(seed)).unwrap();
    (store, stem)
}

#[test]
fn zero_stem_gives_zero_pyramid() {
    let (mut store, stem) = stem_setup(3, 1);
    let ids: alloc::vec::Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let img = g.constant(random_tensor(&[12, 16, 3], 1.0, &mut seeded_rng(2)));
    let p = conv_stem(&mut g, &b, &stem, &[img]).unwrap();
    assert_eq!(p.levels(), 3);
    for &m in &p.maps[0] {
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(g.dims(p.maps[0][0]), &[3, 4, 5]);
}

#[test]
fn extra_levels_leave_first_levels_unchanged() {
    let image = random_tensor(&[64, 96, 3], 1.0, &mut seeded_rng(4));
    let run = |levels| {
        let (store, stem) = stem_setup(levels, 9);
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let img = g.constant(image.clone());
        let p = conv_stem(&mut g, &b, &stem, &[img]).unwrap();
        p.maps[0].iter().map(|&m| g.value(m).clone()).collect::<alloc::vec::Vec<Tensor>>()
    };
    let two = run(2);
    let four = run(4);
    assert_eq!(four.len(), 4);
    assert_eq!(two[..], four[..2]);
    assert_eq!(four[3].dims(), &[2, 3, 5]);
}

#[test]
fn tiny_images_rejected() {
    let (store, stem) = stem_setup(2, 1);
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let img = g.constant(Tensor::zeros(&[3, 8, 3]));
    assert!(matches!(conv_stem(&mut g, &b, &stem, &[img]), Err(Error::Config(_))));
}

#[test]
fn stem_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (mut store, stem) = stem_setup(3, seed);
        let mut rng = seeded_rng(100 + seed);
        store.add("image", random_tensor(&[9, 11, 3], 1.0, &mut rng)).unwrap();
        let readouts: alloc::vec::Vec<Tensor> = [[3, 3, 5], [2, 2, 5], [1, 1, 5]]
            .iter()
            .map(|d| random_tensor(d, 1.0, &mut rng))
            .collect();
        let img_id = store.id("image").unwrap();
        let out = check(
            &store,
            |g, b| {
                let p = conv_stem(g, b, &stem, &[b.var(img_id)])?;
                let mut total = None;
                for (l, &m) in p.maps[0].iter().enumerate() {
                    let r = readout(g, m, &readouts[l])?;
                    total = Some(match total {
                        None => r,
                        Some(t) => g.add(t, r)?,
                    });
                }
                Ok(total.unwrap())
            },
            FdConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(out.max_rel_error < 1e-4, "seed {seed}: {out:?}");
    }
}
