use std::sync::OnceLock;

use osp::config::{BaselineConfig, TrainConfig};
use osp::dataset::{generate, Dataset};
use osp::model::{is_stem_param, PointModel};
use osp::train::{train_baseline, train_points};

struct Data {
    _dir: tempfile::TempDir,
    ds: Dataset,
}

fn data() -> &'static Dataset {
    static D: OnceLock<Data> = OnceLock::new();
    &D.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        generate(dir.path(), 3, 21, 0.5, false).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        Data { _dir: dir, ds }
    })
    .ds
}

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        points: 64,
        d: 12,
        heads: 2,
        groups: 2,
        samples: 2,
        layers: 1,
        levels: 2,
        ffn_hidden: 16,
        head_hidden: 16,
        val_scenes: 1,
        val_every: 1,
        chunk: 512,
        ..TrainConfig::default()
    }
}

const CLASSES: usize = 7;

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = data();
    let (tr, va) = ds.split(1).unwrap();
    let cfg = TrainConfig { lr: 0.0, epochs: 2, ..tiny() };
    let out = train_points(&cfg, CLASSES, &tr, &va, &mut |_| {}).unwrap();
    let init = PointModel::new(cfg.model_spec(CLASSES), cfg.seed).unwrap();
    assert_eq!(out.model.store.len(), init.store.len());
    for ((_, na, a), (_, nb, b)) in out.model.store.iter().zip(init.store.iter()) {
        assert_eq!(na, nb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na} moved");
    }
}

#[test]
fn single_scene_overfit_lowers_the_loss() {
    let ds = data();
    let tr = vec![&ds.scenes[0]];
    let va = vec![&ds.scenes[0]];
    let cfg = TrainConfig { epochs: 30, perturb: 0.0, val_every: 30, ..tiny() };
    let out = train_points(&cfg, CLASSES, &tr, &va, &mut |_| {}).unwrap();
    assert!(out.diverged.is_none());
    let first = out.log[0].loss;
    let last = out.log.last().unwrap().loss;
    assert!(last < 0.7 * first, "loss {first} -> {last}");
}

#[test]
fn identical_seeds_give_identical_first_epochs() {
    let ds = data();
    let (tr, va) = ds.split(1).unwrap();
    let a = train_points(&tiny(), CLASSES, &tr, &va, &mut |_| {}).unwrap();
    let b = train_points(&tiny(), CLASSES, &tr, &va, &mut |_| {}).unwrap();
    assert_eq!(a.log[0].loss.to_bits(), b.log[0].loss.to_bits());
    assert_eq!(a.model.to_container(Some(&a.adam)).unwrap().to_bytes(), b.model.to_container(Some(&b.adam)).unwrap().to_bytes());
    let c = train_points(&TrainConfig { seed: 1, ..tiny() }, CLASSES, &tr, &va, &mut |_| {}).unwrap();
    assert_ne!(a.log[0].loss.to_bits(), c.log[0].loss.to_bits());
}

#[test]
fn checkpoints_reload_to_identical_predictions() {
    let ds = data();
    let (tr, va) = ds.split(1).unwrap();
    let out = train_points(&tiny(), CLASSES, &tr, &va, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ospt");
    out.model.save(&path, Some(&out.adam)).unwrap();
    let c = osp::container::Container::load(&path).unwrap();
    let (back, adam) = PointModel::from_container(&c).unwrap();
    let adam = adam.expect("optimizer state stored");
    assert_eq!(adam.step, out.adam.step);
    assert_eq!(back.spec, out.model.spec);
    let voxels: Vec<usize> = va[0].visible_voxels().into_iter().take(300).collect();
    let p = out.model.predict(va[0], &voxels, None, 128).unwrap();
    let q = back.predict(va[0], &voxels, None, 128).unwrap();
    assert!(p.logits.data().iter().zip(q.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn baseline_training_keeps_the_shared_stem() {
    let ds = data();
    let (tr, va) = ds.split(1).unwrap();
    let point = train_points(&tiny(), CLASSES, &tr, &va, &mut |_| {}).unwrap().model;
    let cfg = BaselineConfig { epochs: 2, points: 128, val_scenes: 1, ..BaselineConfig::default() };
    let out = train_baseline(&cfg, &point, &tr, &mut |_| {}).unwrap();
    assert_eq!(out.log.len(), 2);
    let mut stem = 0;
    for (_, name, t) in out.model.store.iter() {
        if is_stem_param(name) {
            stem += 1;
            let id = point.store.id(name).unwrap();
            assert_eq!(t.data(), point.store.get(id).data(), "{name} changed");
        }
    }
    assert!(stem > 0);
    let vol = out.model.predict_volume(va[0], &out.model.level0(va[0]).unwrap()).unwrap();
    assert_eq!(vol.probs.rows(), va[0].grid.len());
}
