//! Acceptance run on the seeded desk benchmark: 64 training and 16
//! validation scenes. Prints one line per criterion and fails when any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use osp::config::{BaselineConfig, TrainConfig};
use osp::container::{Container, NamedTensor, TensorData};
use osp::dataset::{generate, Dataset, SceneData};
use osp::eval::{evaluate_constant, evaluate_point, majority_class, Evaluation, Range};
use osp::experiment::{beyond, refine, refine_inputs};
use osp::model::PointModel;
use osp::train::{train_baseline, train_points, TrainOutcome};
use osp_core::gradcheck::{grad_check_suite, SuiteOptions};
use osp_core::oracle;
use osp_core::refine::{FuseMode, RegionMode};
use rand::{Rng, SeedableRng};

const DATA_SEED: u64 = 1;
const SCENES: usize = 80;
const VAL: usize = 16;
const CLASSES: usize = 7;
const CHUNK: usize = 1024;

/// Margin over the majority and untrained predictors.
const LEARNING_MARGIN: f64 = 0.10;
const EARLY_EXIT_THRESHOLD: f64 = 0.9;
const EARLY_EXIT_MAX_COMPUTE: f64 = 0.95;
const EARLY_EXIT_MAX_DROP: f64 = 0.02;
const REFINE_TOLERANCE: f64 = 0.005;
const REFINE_GAIN: f64 = 0.01;
const ABLATION_TOLERANCE: f64 = 0.005;
const ORACLE_TOLERANCE: f64 = 1e-9;
const ORACLE_SEEDS: u64 = 50;
const GRAD_SEEDS: u64 = 20;
const GRAD_BUDGET_S: f64 = 120.0;
const LEARNING_BUDGET_S: f64 = 45.0 * 60.0;

struct Outcome {
    results: Vec<(usize, bool)>,
}

impl Outcome {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push((n, pass));
    }
}

fn train(cfg: &TrainConfig, tr: &[&SceneData], va: &[&SceneData], label: &str) -> TrainOutcome {
    let t = Instant::now();
    let out = train_points(cfg, CLASSES, tr, va, &mut |e| eprintln!("[{label}] {}", e.line())).expect("training runs");
    eprintln!("[{label}] best val {:?} after {:.0}s", out.best_val(), t.elapsed().as_secs_f64());
    out
}

fn bits_equal(a: &Evaluation, b: &Evaluation) -> bool {
    a.report == b.report
        && a.scenes.len() == b.scenes.len()
        && a.scenes.iter().zip(&b.scenes).all(|(x, y)| {
            x.voxels == y.voxels && x.labels == y.labels && x.probs.data().iter().zip(y.probs.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn criterion_1(out: &mut Outcome) {
    let t = Instant::now();
    let rep = grad_check_suite(SuiteOptions {
        seeds: GRAD_SEEDS,
        ..SuiteOptions::default()
    })
    .expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = rep.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
    out.record(
        1,
        rep.passed() && secs < GRAD_BUDGET_S && rep.ops.iter().all(|o| o.checked > 0),
        format!("ops={} seeds={} worst_rel_error={worst:.3e} (< 1e-4) runtime={secs:.1}s (< {GRAD_BUDGET_S}s)", rep.ops.len(), rep.seeds),
    );
}

fn criterion_2(out: &mut Outcome) {
    let checks = oracle::all(ORACLE_SEEDS);
    let pass = checks.iter().all(|c| c.passed(ORACLE_TOLERANCE) && c.instances >= ORACLE_SEEDS);
    let detail: Vec<String> = checks.iter().map(|c| format!("{}:dev={:.1e},mismatch={}", c.name, c.max_deviation, c.mismatches)).collect();
    out.record(2, pass, format!("instances={ORACLE_SEEDS} tol={ORACLE_TOLERANCE:e} {}", detail.join(" ")));
}

fn criterion_8(out: &mut Outcome) {
    let bin = env!("CARGO_BIN_EXE_osp");
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| -> Option<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let root = dir.path().join(tag);
        let data = root.join("data");
        let ckpt = root.join("model.ospt");
        let report = root.join("eval.txt");
        let steps: [Vec<String>; 3] = [
            ["gen-data", "--scenes", "4", "--seed", "99", "--out"].iter().map(|s| s.to_string()).chain([data.display().to_string()]).collect(),
            [
                "train", "--epochs", "2", "--points", "64", "--val-scenes", "1", "--val-every", "1", "--seed", "3", "--data",
            ]
            .iter()
            .map(|s| s.to_string())
            .chain([data.display().to_string(), "--out".into(), ckpt.display().to_string()])
            .collect(),
            ["eval", "--val-scenes", "1", "--mode", "early-exit:0.9", "--data"]
                .iter()
                .map(|s| s.to_string())
                .chain([data.display().to_string(), "--ckpt".into(), ckpt.display().to_string(), "--report".into(), report.display().to_string()])
                .collect(),
        ];
        for args in &steps {
            let o = Command::new(bin).args(args).output().ok()?;
            if !o.status.success() {
                eprintln!("{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
                return None;
            }
        }
        let kv = Path::new(&format!("{}.kv", report.display())).to_path_buf();
        Some((std::fs::read(&ckpt).ok()?, std::fs::read(&report).ok()?, std::fs::read(kv).ok()?))
    };
    let (a, b) = (run("a"), run("b"));
    let pass = matches!((&a, &b), (Some(x), Some(y)) if x == y);
    let size = a.as_ref().map_or(0, |x| x.0.len());
    out.record(8, pass, format!("two gen-data + train + eval runs: checkpoint ({size} bytes), report and key/value file bit-identical"));
}

fn criterion_9(out: &mut Outcome) {
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let mut c = Container::new();
    for i in 0..1000 {
        let dims: Vec<usize> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(1..6)).collect();
        let n: usize = dims.iter().product();
        let data = match i % 4 {
            0 => TensorData::F64((0..n).map(|_| f64::from_bits(rng.gen())).collect()),
            1 => TensorData::F32((0..n).map(|_| f32::from_bits(rng.gen())).collect()),
            2 => TensorData::U8((0..n).map(|_| rng.gen()).collect()),
            _ => TensorData::U32((0..n).map(|_| rng.gen()).collect()),
        };
        c.push(NamedTensor::new(&format!("tensor{i}"), &dims, data).unwrap()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ospt");
    c.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let round = Container::load(&path).map(|b| b.to_bytes() == bytes && b.tensors.len() == 1000).unwrap_or(false);
    // exhaustive on a small file, sampled on the large one
    let small = {
        let mut s = Container::new();
        for t in c.tensors.iter().take(8) {
            s.push(t.clone()).unwrap();
        }
        s.to_bytes()
    };
    let mut missed = 0;
    let mut tried = 0;
    for pos in 0..small.len() {
        for flip in [0x01u8, 0x10, 0x80, 0xff] {
            let mut b = small.clone();
            b[pos] ^= flip;
            tried += 1;
            missed += usize::from(Container::from_bytes(&b).is_ok());
        }
    }
    for _ in 0..2000 {
        let pos = rng.gen_range(0..bytes.len());
        let mut b = bytes.clone();
        b[pos] ^= rng.gen_range(1..=255u8);
        tried += 1;
        missed += usize::from(Container::from_bytes(&b).is_ok());
    }
    out.record(9, round && missed == 0, format!("1000 tensors round_trip_identical={round} corruptions_tried={tried} undetected={missed}"));
}

fn main() {
    let mut out = Outcome { results: Vec::new() };
    criterion_1(&mut out);
    criterion_2(&mut out);
    criterion_9(&mut out);
    criterion_8(&mut out);

    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    generate(dir.path(), SCENES, DATA_SEED, 0.5, false).expect("benchmark generates");
    let ds = Dataset::load(dir.path()).expect("benchmark loads");
    let (tr, va) = ds.split(VAL).unwrap();
    eprintln!("generated {SCENES} scenes in {:.0}s", start.elapsed().as_secs_f64());

    let cfg = TrainConfig::default();
    let main = train(&cfg, &tr, &va, "main");
    let learn_secs = start.elapsed().as_secs_f64();
    let full = main.best_eval.clone().expect("validation ran");
    let majority = majority_class(&tr, CLASSES);
    let maj = evaluate_constant(&va, CLASSES, Range::All, majority).unwrap();
    let untrained = evaluate_point(&PointModel::new(cfg.model_spec(CLASSES), cfg.seed).unwrap(), &va, Range::All, None, CHUNK).unwrap();
    let v = full.miou();
    out.record(
        3,
        v >= maj.miou + LEARNING_MARGIN && v >= untrained.miou() + LEARNING_MARGIN && learn_secs <= LEARNING_BUDGET_S && main.diverged.is_none(),
        format!(
            "val_miou={v:.4} majority(class {majority})={:.4} untrained={:.4} margin>={LEARNING_MARGIN} runtime={learn_secs:.0}s (<= {LEARNING_BUDGET_S}s)",
            maj.miou,
            untrained.miou()
        ),
    );

    let ee = evaluate_point(&main.model, &va, Range::All, Some(EARLY_EXIT_THRESHOLD), CHUNK).unwrap();
    let above = evaluate_point(&main.model, &va, Range::All, Some(1.5), CHUNK).unwrap();
    let drop = v - ee.miou();
    let identical = bits_equal(&above, &full);
    out.record(
        4,
        ee.relative_computation < EARLY_EXIT_MAX_COMPUTE && drop <= EARLY_EXIT_MAX_DROP && identical,
        format!(
            "threshold={EARLY_EXIT_THRESHOLD} relative_computation={:.4} (< {EARLY_EXIT_MAX_COMPUTE}) miou_drop={drop:.4} (<= {EARLY_EXIT_MAX_DROP}) threshold_1.5_bit_identical={identical}",
            ee.relative_computation
        ),
    );

    let bcfg = BaselineConfig::default();
    let base = train_baseline(&bcfg, &main.model, &tr, &mut |e| eprintln!("[baseline] {}", e.line())).expect("baseline trains");
    let inputs = refine_inputs(&main.model, &base.model, &va, CHUNK, Some(full.clone())).unwrap();
    let grid = ds.grid().unwrap();
    let extent = grid.bounds.max[0] - grid.bounds.min[0];
    let r = refine(&inputs, &va, &[RegionMode::Box(extent), RegionMode::Box(extent / 2.0)], &[0.5], FuseMode::Probability).unwrap();
    let (fused_full, fused_half, b) = (r.rows[0].miou, r.rows[1].miou, r.baseline_miou);
    out.record(
        5,
        fused_full >= fused_half && fused_half >= b - REFINE_TOLERANCE && fused_full >= b + REFINE_GAIN,
        format!("lambda=0.5 baseline={b:.4} fused_half={fused_half:.4} fused_full={fused_full:.4} point_only={:.4} tol={REFINE_TOLERANCE} gain>={REFINE_GAIN}", r.point_miou),
    );

    let inner_cfg = TrainConfig { inner: Some(0.75), ..cfg.clone() };
    let inner = train(&inner_cfg, &tr, &va, "inner");
    let bo = beyond(&inner.model, &tr, &va, 0.75, CHUNK).unwrap();
    let (i_m, a_m) = (bo.get("inner").miou, bo.get("annulus").miou);
    let a_maj = bo.ranges.iter().find(|r| r.0 == "annulus").unwrap().2.miou;
    out.record(
        6,
        a_m > a_maj && i_m > a_m,
        format!("inner_fraction=0.75 inner={i_m:.4} full={:.4} annulus={a_m:.4} annulus_majority={a_maj:.4}", bo.get("full").miou),
    );

    let mut lines = Vec::new();
    let mut pass7 = true;
    for (name, c) in [
        ("layers 3 vs 1", TrainConfig { layers: 1, ..cfg.clone() }),
        ("perturb on vs off", TrainConfig { perturb: 0.0, ..cfg.clone() }),
        ("levels 4 vs 2", TrainConfig { levels: 2, ..cfg.clone() }),
        ("dice on vs off", TrainConfig { dice: false, ..cfg.clone() }),
    ] {
        let ab = train(&c, &tr, &va, name).best_val().unwrap_or(0.0);
        let ok = v >= ab - ABLATION_TOLERANCE;
        pass7 &= ok;
        lines.push(format!("[{name}: {v:.4} vs {ab:.4} {}]", if ok { "ok" } else { "reversed" }));
    }
    out.record(7, pass7, format!("tol={ABLATION_TOLERANCE} {}", lines.join(" ")));

    out.results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = out.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria pass", out.results.len() - failed.len(), out.results.len());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
