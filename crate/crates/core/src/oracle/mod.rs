//! Brute-force reference implementations and seeded comparisons against the
//! library. Built for tests and behind the `oracles` feature.

pub mod decoder;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::decoder::softmax_rows;
use crate::diffcore::{Graph, Tensor};
use crate::geometry::{pixel_rays, slab_interval, visibility_mask, Camera, CameraRig, GridSpec, SceneBounds};
use crate::gradcheck::random_tensor;
use crate::losses::{dice_loss, weighted_ce, CeNorm, ClassWeights, DiceMode};
use crate::math::{self, Vec3};
use crate::metrics::{miou, Confusion};
use crate::refine::{adaptive_region, RegionMode, VolumePrediction};
use crate::seeded_rng;

/// Outcome of one seeded comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: u64,
    /// Largest absolute difference of floating outputs.
    pub max_deviation: f64,
    /// Integer outputs or structural properties that disagreed.
    pub mismatches: usize,
}

impl OracleCheck {
    pub fn new(name: &'static str, instances: u64, max_deviation: f64, mismatches: usize) -> Self {
        Self {
            name,
            instances,
            max_deviation,
            mismatches,
        }
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.mismatches == 0 && self.max_deviation <= tol
    }
}

/// Every comparison with `seeds` instances each.
pub fn all(seeds: u64) -> Vec<OracleCheck> {
    vec![
        decoder::deformable_attention(seeds),
        decoder::pca(seeds),
        decoder::gpca(seeds),
        weighted_ce_check(seeds),
        dice_check(seeds),
        miou_check(seeds),
        visibility_check(seeds, 8),
        adaptive_region_check(seeds),
    ]
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| math::exp(v - m)).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `-sum_n w_y log softmax(x_n)_y`, divided by `sum_n w_y` in weighted-mean mode.
pub fn ce_oracle(logits: &Tensor, labels: &[usize], w: &ClassWeights, norm: CeNorm) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        num -= w.0[y] * math::ln(softmax(logits.row(n))[y]);
        den += w.0[y];
    }
    match norm {
        CeNorm::WeightedMean => num / den,
        CeNorm::Sum => num,
    }
}

/// Soft dice per class, `1 - 2 sum p t / (sum p^2 + sum t + 1e-6)`; macro
/// mode averages the classes present in the labels, binary mode scores
/// occupied against empty.
pub fn dice_oracle(probs: &Tensor, labels: &[usize], mode: DiceMode) -> f64 {
    let term = |p: &dyn Fn(usize) -> f64, t: &dyn Fn(usize) -> bool| {
        let (mut i, mut pp, mut gg) = (0.0, 0.0, 0.0);
        for n in 0..labels.len() {
            let (pv, tv) = (p(n), if t(n) { 1.0 } else { 0.0 });
            i += pv * tv;
            pp += pv * pv;
            gg += tv * tv;
        }
        1.0 - 2.0 * i / (pp + gg + 1e-6)
    };
    match mode {
        DiceMode::Macro => {
            let classes = probs.cols();
            let present: Vec<usize> = (0..classes).filter(|c| labels.contains(c)).collect();
            let sum: f64 = present.iter().map(|&c| term(&|n| probs.row(n)[c], &|n| labels[n] == c)).sum();
            sum / present.len().max(1) as f64
        }
        DiceMode::Binary => term(&|n| 1.0 - probs.row(n)[0], &|n| labels[n] != 0),
    }
}

pub fn weighted_ce_check(seeds: u64) -> OracleCheck {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = seeded_rng(6000 + seed);
        let (n, c) = (rng.gen_range(1..12), rng.gen_range(2..8));
        let logits = random_tensor(&[n, c], 3.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let w = ClassWeights((0..c).map(|_| rng.gen_range(0.1..3.0)).collect());
        for norm in [CeNorm::WeightedMean, CeNorm::Sum] {
            let mut g = Graph::new();
            let x = g.constant(logits.clone());
            let l = weighted_ce(&mut g, x, &labels, &w, norm).unwrap();
            worst = worst.max(math::abs(g.value(l).item() - ce_oracle(&logits, &labels, &w, norm)));
        }
    }
    OracleCheck::new("weighted_ce", seeds, worst, 0)
}

pub fn dice_check(seeds: u64) -> OracleCheck {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = seeded_rng(7000 + seed);
        let (n, c) = (rng.gen_range(1..12), rng.gen_range(2..8));
        let probs = softmax_rows(&random_tensor(&[n, c], 2.5, &mut rng));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        for mode in [DiceMode::Macro, DiceMode::Binary] {
            let mut g = Graph::new();
            let x = g.constant(probs.clone());
            let l = dice_loss(&mut g, x, &labels, mode).unwrap();
            worst = worst.max(math::abs(g.value(l).item() - dice_oracle(&probs, &labels, mode)));
        }
    }
    OracleCheck::new("dice_loss", seeds, worst, 0)
}

/// Random predictions correct with probability 0.6, visible with 0.7.
pub fn random_grid(seed: u64, n: usize, classes: u8) -> (Vec<u8>, Vec<u8>, Vec<bool>) {
    let mut rng = seeded_rng(seed);
    let gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let pred = gt
        .iter()
        .map(|&g| if rng.gen_bool(0.6) { g } else { rng.gen_range(0..classes) })
        .collect();
    let vis = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    (pred, gt, vis)
}

/// Per-class counts by direct enumeration and the mean IoU over non-empty
/// classes from those counts.
pub fn miou_check(seeds: u64) -> OracleCheck {
    let mut mismatches = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (pred, gt, vis) = random_grid(seed, 512, 5);
        let mut c = Confusion::new(5);
        c.accumulate(&pred, &gt, &vis).unwrap();
        let mut ious = Vec::new();
        for k in 0..5u8 {
            let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
            for i in (0..512).filter(|&i| vis[i]) {
                tp += u64::from(pred[i] == k && gt[i] == k);
                fp += u64::from(pred[i] == k && gt[i] != k);
                fneg += u64::from(pred[i] != k && gt[i] == k);
            }
            let k = usize::from(k);
            mismatches += usize::from((c.tp[k], c.fp[k], c.fn_[k]) != (tp, fp, fneg));
            if k != 0 && tp + fp + fneg > 0 {
                ious.push(tp as f64 / (tp + fp + fneg) as f64);
            }
        }
        let expect = ious.iter().sum::<f64>() / ious.len() as f64;
        worst = worst.max(math::abs(miou(&c, &[0]).miou - expect));
    }
    OracleCheck::new("miou", seeds, worst, mismatches)
}

/// Parameter interval of the segment `o + t d`, `t in [0, t_end]`, inside a
/// box, when the clipped length is not negligible.
fn clip(lo: Vec3, hi: Vec3, o: Vec3, d: Vec3, t_end: f64) -> Option<(f64, f64)> {
    let b = SceneBounds { min: lo, max: hi };
    let (t0, t1) = slab_interval(&b, o, d)?;
    let (t0, t1) = (t0.max(0.0), t1.min(t_end));
    let len = (t1 - t0) * math::norm(d);
    (len > 1e-7).then_some((t0, t1))
}

fn voxel_box(g: &GridSpec, i: usize) -> (Vec3, Vec3) {
    let c = g.center(i);
    let h = math::scale(g.voxel, 0.5);
    (math::sub(c, h), math::add(c, h))
}

/// Visibility with every voxel tested independently by exact box clipping:
/// a voxel center is seen when no other occupied voxel cuts the segment from
/// the camera, and a pixel ray sees every voxel it enters up to and
/// including the first occupied one.
pub fn brute_visibility(labels: &[u8], g: &GridSpec, rig: &CameraRig) -> Vec<bool> {
    let mut vis = vec![false; g.len()];
    for cam in &rig.cameras {
        let o = cam.center();
        for target in 0..g.len() {
            let c = g.center(target);
            if !cam.project(c).hit {
                continue;
            }
            let d = math::sub(c, o);
            let blocked = (0..g.len()).any(|i| {
                if i == target || labels[i] == 0 {
                    return false;
                }
                let (lo, hi) = voxel_box(g, i);
                clip(lo, hi, o, d, 1.0).is_some()
            });
            if !blocked {
                vis[target] = true;
            }
        }
        for (_, d) in pixel_rays(cam) {
            let mut first = f64::INFINITY;
            let mut spans = Vec::new();
            for i in 0..g.len() {
                let (lo, hi) = voxel_box(g, i);
                if let Some((t0, _)) = clip(lo, hi, o, d, f64::INFINITY) {
                    spans.push((i, t0));
                    if labels[i] != 0 {
                        first = first.min(t0);
                    }
                }
            }
            for (i, t0) in spans {
                if t0 <= first + 1e-9 {
                    vis[i] = true;
                }
            }
        }
    }
    vis
}

/// A unit-voxel cube of side `n` with random occupancy and two cameras
/// placed in empty voxels.
pub fn random_scene(seed: u64, n: usize, density: f64) -> (GridSpec, Vec<u8>, CameraRig) {
    let mut rng = seeded_rng(seed);
    let g = GridSpec::new(SceneBounds::new([0.0; 3], [n as f64; 3]).unwrap(), [n; 3]).unwrap();
    let mut labels: Vec<u8> = (0..g.len()).map(|_| u8::from(rng.gen_bool(density)) * rng.gen_range(1..4)).collect();
    let mut cams = Vec::new();
    for _ in 0..2 {
        let pos = [
            rng.gen_range(0.3..n as f64 - 0.3),
            rng.gen_range(0.3..n as f64 - 0.3),
            rng.gen_range(0.3..n as f64 - 0.3),
        ];
        if let Some(i) = g.voxel_at(pos) {
            labels[i] = 0;
        }
        let yaw = rng.gen_range(0.0..6.28);
        let pitch = rng.gen_range(-0.5..0.5);
        cams.push(Camera::looking(pos, yaw, pitch, 1.6, 9, 7).unwrap());
    }
    (g, labels, CameraRig::new(cams).unwrap())
}

/// Voxels on which the traversal and the clipping oracle disagree.
pub fn visibility_check(seeds: u64, n: usize) -> OracleCheck {
    let mut mismatches = 0;
    for seed in 0..seeds {
        let (g, labels, rig) = random_scene(100 + seed, n, 0.04 * (16.0 / n as f64));
        let fast = visibility_mask(&labels, &g, &rig).unwrap();
        let slow = brute_visibility(&labels, &g, &rig);
        mismatches += fast.iter().zip(&slow).filter(|(a, b)| a != b).count();
    }
    OracleCheck::new("visibility_mask", seeds, 0.0, mismatches)
}

pub fn random_volume(seed: u64, n: usize, c: usize, sharp: f64) -> VolumePrediction {
    let logits = random_tensor(&[n, c], sharp, &mut seeded_rng(seed));
    VolumePrediction::new(softmax_rows(&logits)).unwrap()
}

/// Threshold selection by filtering and top-fraction selection by a
/// selection sort on (confidence, index).
pub fn adaptive_region_check(seeds: u64) -> OracleCheck {
    let mut mismatches = 0;
    for seed in 0..seeds {
        let vol = random_volume(100 + seed, 40, 5, 2.5);
        let conf: Vec<f64> = (0..40).map(|r| vol.probs.row(r).iter().copied().fold(0.0, f64::max)).collect();
        let thr: Vec<usize> = (0..40).filter(|&r| conf[r] < 0.6).collect();
        mismatches += usize::from(adaptive_region(&vol, RegionMode::Threshold(0.6)).unwrap().voxels != thr);
        let mut remaining: Vec<usize> = (0..40).collect();
        let mut picked = Vec::new();
        for _ in 0..8 {
            let mut best = 0;
            for k in 1..remaining.len() {
                let (a, b) = (remaining[k], remaining[best]);
                if conf[a] < conf[b] || (conf[a] == conf[b] && a < b) {
                    best = k;
                }
            }
            picked.push(remaining.remove(best));
        }
        picked.sort_unstable();
        mismatches += usize::from(adaptive_region(&vol, RegionMode::TopFraction(0.2)).unwrap().voxels != picked);
    }
    OracleCheck::new("adaptive_region", seeds, 0.0, mismatches)
}
