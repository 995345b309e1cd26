//! Training losses: class-weighted cross-entropy and dice.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{CustomOp, Graph, Tensor, Var};
use crate::error::{bail, Result};
use crate::math;

/// Positive per-class loss weights, index = class id.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

const WEIGHT_EPS: f64 = 0.001;
const DICE_DELTA: f64 = 1e-6;

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w_c = 1 / ln(n_c + 0.001)` over raw label counts `n_c`.
///
/// Classes whose count gives a non-positive or non-finite weight (counts of
/// zero) receive the largest weight among the remaining classes.
pub fn class_weights(counts: &[f64]) -> Result<ClassWeights> {
    if counts.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
        bail!(Data, "class counts must be finite and non-negative");
    }
    if !(counts.iter().sum::<f64>() > 0.0) {
        bail!(Data, "class counts sum to zero");
    }
    let raw: Vec<f64> = counts.iter().map(|&c| 1.0 / math::ln(c + WEIGHT_EPS)).collect();
    let valid = |w: f64| w.is_finite() && w > 0.0;
    let cap = raw.iter().copied().filter(|&w| valid(w)).fold(f64::NAN, f64::max);
    if cap.is_nan() {
        bail!(Data, "no class count yields a usable weight");
    }
    Ok(ClassWeights(raw.into_iter().map(|w| if valid(w) { w } else { cap }).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CeNorm {
    /// Divide by the summed weights of the batch labels.
    WeightedMean,
    /// Plain weighted sum.
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiceMode {
    /// Mean of per-class dice over the classes present in the labels.
    Macro,
    /// One dice term on occupied (any non-empty class) versus empty.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub ce_norm: CeNorm,
    pub dice: Option<DiceMode>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce_norm: CeNorm::WeightedMean,
            dice: Some(DiceMode::Macro),
        }
    }
}

fn check_labels(values: &Tensor, labels: &[usize], what: &str) -> Result<usize> {
    if values.rank() != 2 || values.rows() != labels.len() {
        bail!(Contract, "{} of dims {:?} do not match {} labels", what, values.dims(), labels.len());
    }
    let classes = values.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        bail!(Data, "label {} out of range for {} classes", bad, classes);
    }
    Ok(classes)
}

struct CeOp {
    labels: Vec<usize>,
    /// Per-row factor `w_y / norm`.
    coef: Vec<f64>,
}

impl CustomOp for CeOp {
    fn name(&self) -> &'static str {
        "weighted_ce"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let logits = inputs[0];
        let c = logits.cols();
        let g = grad.item();
        let mut out = Tensor::zeros(logits.dims());
        for (n, (&y, &k)) in self.labels.iter().zip(&self.coef).enumerate() {
            let row = logits.row(n);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| math::exp(v - m)).sum();
            let dst = &mut out.data_mut()[n * c..(n + 1) * c];
            for j in 0..c {
                let p = math::exp(row[j] - m) / z;
                dst[j] = g * k * (p - if j == y { 1.0 } else { 0.0 });
            }
        }
        vec![Some(out)]
    }
}

/// Class-weighted cross-entropy of `[N, C]` logits.
pub fn weighted_ce(g: &mut Graph, logits: Var, labels: &[usize], w: &ClassWeights, norm: CeNorm) -> Result<Var> {
    let v = g.value(logits);
    let classes = check_labels(v, labels, "logits")?;
    if w.len() != classes {
        bail!(Contract, "{} class weights for {} classes", w.len(), classes);
    }
    if labels.is_empty() {
        bail!(Contract, "cross-entropy over an empty batch");
    }
    let denom = match norm {
        CeNorm::WeightedMean => labels.iter().map(|&y| w.0[y]).sum::<f64>(),
        CeNorm::Sum => 1.0,
    };
    let coef: Vec<f64> = labels.iter().map(|&y| w.0[y] / denom).collect();
    let mut loss = 0.0;
    for (n, (&y, &k)) in labels.iter().zip(&coef).enumerate() {
        let row = v.row(n);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + math::ln(row.iter().map(|&x| math::exp(x - m)).sum());
        loss -= k * (row[y] - lse);
    }
    if !loss.is_finite() {
        bail!(Numeric, "non-finite cross-entropy");
    }
    let value = Tensor::scalar(loss);
    Ok(g.custom(&[logits], value, CeOp { labels: labels.to_vec(), coef }))
}

/// One dice term: probabilities `p`, binary targets `t`.
/// Returns the loss and its per-element derivative.
fn dice_term(p: &[f64], t: &[bool]) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut pp = 0.0;
    let mut gg = 0.0;
    for (&pi, &ti) in p.iter().zip(t) {
        if ti {
            inter += pi;
            gg += 1.0;
        }
        pp += pi * pi;
    }
    let d = pp + gg + DICE_DELTA;
    let loss = 1.0 - 2.0 * inter / d;
    let grad = p
        .iter()
        .zip(t)
        .map(|(&pi, &ti)| -2.0 * f64::from(u8::from(ti)) / d + 4.0 * inter * pi / (d * d))
        .collect();
    (loss, grad)
}

struct DiceOp {
    /// d loss / d probs, row-major like the input.
    jac: Vec<f64>,
}

impl CustomOp for DiceOp {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.item();
        let data = self.jac.iter().map(|&j| g * j).collect();
        vec![Some(Tensor::new(inputs[0].dims(), data).expect("jacobian matches input"))]
    }
}

/// Dice loss of `[N, C]` class probabilities.
pub fn dice_loss(g: &mut Graph, probs: Var, labels: &[usize], mode: DiceMode) -> Result<Var> {
    let v = g.value(probs);
    let classes = check_labels(v, labels, "probabilities")?;
    let n = labels.len();
    let mut jac = vec![0.0; n * classes];
    let loss = match mode {
        DiceMode::Macro => {
            let mut present = vec![false; classes];
            for &l in labels {
                present[l] = true;
            }
            let count = present.iter().filter(|&&p| p).count().max(1) as f64;
            let mut total = 0.0;
            for c in (0..classes).filter(|&c| present[c]) {
                let p: Vec<f64> = (0..n).map(|i| v.row(i)[c]).collect();
                let t: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                let (l, dl) = dice_term(&p, &t);
                total += l / count;
                for i in 0..n {
                    jac[i * classes + c] = dl[i] / count;
                }
            }
            total
        }
        DiceMode::Binary => {
            let p: Vec<f64> = (0..n).map(|i| 1.0 - v.row(i)[0]).collect();
            let t: Vec<bool> = labels.iter().map(|&l| l != 0).collect();
            let (l, dl) = dice_term(&p, &t);
            for i in 0..n {
                jac[i * classes] = -dl[i];
            }
            l
        }
    };
    Ok(g.custom(&[probs], Tensor::scalar(loss), DiceOp { jac }))
}

/// Cross-entropy plus (optionally) dice on the softmax of the logits.
pub fn total_loss(g: &mut Graph, logits: Var, labels: &[usize], w: &ClassWeights, cfg: LossConfig) -> Result<Var> {
    let ce = weighted_ce(g, logits, labels, w, cfg.ce_norm)?;
    match cfg.dice {
        None => Ok(ce),
        Some(mode) => {
            let probs = g.softmax(logits)?;
            let d = dice_loss(g, probs, labels, mode)?;
            g.add(ce, d)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamStore;
    use crate::error::Error;
    use crate::gradcheck::{check, random_tensor, FdConfig};
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn ce_value(logits: &Tensor, labels: &[usize], w: &ClassWeights, norm: CeNorm) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(logits.clone());
        let l = weighted_ce(&mut g, x, labels, w, norm).unwrap();
        g.value(l).item()
    }

    fn dice_value(probs: &Tensor, labels: &[usize], mode: DiceMode) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(probs.clone());
        let l = dice_loss(&mut g, x, labels, mode).unwrap();
        g.value(l).item()
    }

    #[test]
    fn weights_examples() {
        let w = class_weights(&[50.0, 50.0]).unwrap();
        assert_eq!(w.0[0], w.0[1]);
        let w = class_weights(&[900.0, 100.0]).unwrap();
        assert!((w.0[0] - 0.147_007_027_885_316_6).abs() < 1e-12);
        assert!((w.0[1] - 0.217_146_769_425_764_94).abs() < 1e-12);
        let w = class_weights(&[10.0, 0.0, 3.0]).unwrap();
        assert_eq!(w.0[1], w.0[2]);
        assert!(w.0.iter().all(|&v| v > 0.0 && v.is_finite()));
        assert!(matches!(class_weights(&[1.0, -1.0]), Err(Error::Data(_))));
        assert!(matches!(class_weights(&[0.0, 0.0]), Err(Error::Data(_))));
    }

    #[test]
    fn ce_examples() {
        let w = ClassWeights::uniform(7);
        let flat = Tensor::zeros(&[1, 7]);
        for c in 0..7 {
            assert!((ce_value(&flat, &[c], &w, CeNorm::WeightedMean) - 7f64.ln()).abs() < 1e-12);
        }
        let sharp = Tensor::new(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        assert!(ce_value(&sharp, &[0], &ClassWeights::uniform(3), CeNorm::WeightedMean) < 1e-20);

        let logits = Tensor::new(&[3, 3], vec![0.2, -1.0, 0.5, 1.5, 0.3, -0.7, -0.1, 0.0, 2.0]).unwrap();
        let labels = [2, 0, 1];
        let w = ClassWeights(vec![0.5, 2.0, 1.25]);
        // -sum w_y log softmax_y / sum w_y, terms written out by hand
        let term = |r: [f64; 3], y: usize| {
            let z = r[0].exp() + r[1].exp() + r[2].exp();
            -(r[y].exp() / z).ln()
        };
        let num = 1.25 * term([0.2, -1.0, 0.5], 2) + 0.5 * term([1.5, 0.3, -0.7], 0) + 2.0 * term([-0.1, 0.0, 2.0], 1);
        assert!((ce_value(&logits, &labels, &w, CeNorm::WeightedMean) - num / 3.75).abs() < 1e-12);
        assert!((ce_value(&logits, &labels, &w, CeNorm::Sum) - num).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_label() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let r = weighted_ce(&mut g, x, &[3], &ClassWeights::uniform(3), CeNorm::WeightedMean);
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn dice_examples() {
        let labels = [0, 1, 2, 1];
        let onehot = Tensor::from_fn(&[4, 3], |i| f64::from(u8::from(labels[i / 3] == i % 3)));
        assert!(dice_value(&onehot, &labels, DiceMode::Macro) < 1e-5);
        let shifted = Tensor::from_fn(&[4, 3], |i| f64::from(u8::from((labels[i / 3] + 1) % 3 == i % 3)));
        assert!((dice_value(&shifted, &labels, DiceMode::Macro) - 1.0).abs() < 1e-12);

        let probs = Tensor::new(
            &[4, 3],
            vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.25, 0.25, 0.5, 0.1, 0.7, 0.2],
        )
        .unwrap();
        let labels = [1, 0, 2, 1];
        let per_class = |c: usize| {
            let mut i = 0.0;
            let mut pp = 0.0;
            let mut gg = 0.0;
            for n in 0..4 {
                let p = probs.row(n)[c];
                let t = if labels[n] == c { 1.0 } else { 0.0 };
                i += p * t;
                pp += p * p;
                gg += t * t;
            }
            1.0 - 2.0 * i / (pp + gg + 1e-6)
        };
        let expect = (per_class(0) + per_class(1) + per_class(2)) / 3.0;
        assert!((dice_value(&probs, &labels, DiceMode::Macro) - expect).abs() < 1e-12);
        // class 0 absent from the labels: only classes 1 and 2 are averaged
        let absent = [1, 1, 2, 1];
        let mut i = [0.0; 3];
        let mut pp = [0.0; 3];
        let mut gg = [0.0; 3];
        for n in 0..4 {
            for c in 1..3 {
                let p = probs.row(n)[c];
                let t = if absent[n] == c { 1.0 } else { 0.0 };
                i[c] += p * t;
                pp[c] += p * p;
                gg[c] += t;
            }
        }
        let expect = (2.0 - 2.0 * i[1] / (pp[1] + gg[1] + 1e-6) - 2.0 * i[2] / (pp[2] + gg[2] + 1e-6)) / 2.0;
        assert!((dice_value(&probs, &absent, DiceMode::Macro) - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_and_dice_match_loop_oracles() {
        let c = crate::oracle::weighted_ce_check(50);
        assert!(c.passed(1e-9), "{c:?}");
        let c = crate::oracle::dice_check(50);
        assert!(c.passed(1e-9), "{c:?}");
    }

    #[test]
    fn total_is_sum_and_flag_drops_dice() {
        let mut rng = seeded_rng(3);
        let logits = random_tensor(&[6, 4], 2.0, &mut rng);
        let labels = [0, 3, 1, 1, 2, 0];
        let w = ClassWeights(vec![0.3, 1.0, 1.7, 0.9]);
        let ce = ce_value(&logits, &labels, &w, CeNorm::WeightedMean);
        let mut probs = logits.clone();
        for r in 0..6 {
            let row = &mut probs.data_mut()[r * 4..r * 4 + 4];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        }
        let dice = dice_value(&probs, &labels, DiceMode::Macro);
        let total = |cfg| {
            let mut g = Graph::new();
            let x = g.constant(logits.clone());
            let l = total_loss(&mut g, x, &labels, &w, cfg).unwrap();
            g.value(l).item()
        };
        assert!((total(LossConfig::default()) - (ce + dice)).abs() < 1e-12);
        let no_dice = LossConfig {
            dice: None,
            ..LossConfig::default()
        };
        assert_eq!(total(no_dice), ce);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let w = ClassWeights(vec![0.4, 1.3, 0.8, 2.1]);
        for seed in 0..20 {
            let mut rng = seeded_rng(seed);
            let mut store = ParamStore::new();
            store.add("logits", random_tensor(&[7, 4], 1.5, &mut rng)).unwrap();
            let labels: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
            for cfg in [
                LossConfig::default(),
                LossConfig {
                    ce_norm: CeNorm::Sum,
                    dice: Some(DiceMode::Binary),
                },
            ] {
                let out = check(
                    &store,
                    |g, b| total_loss(g, b.var(store.id("logits").unwrap()), &labels, &w, cfg),
                    FdConfig::default(),
                    &mut rng,
                )
                .unwrap();
                assert!(out.max_rel_error < 1e-4, "seed {seed}: {out:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn ce_decreases_with_correct_logit(seed in 0u64..1000, row in 0usize..5, bump in 0.01f64..3.0) {
            let mut rng = seeded_rng(seed);
            let logits = random_tensor(&[5, 3], 2.0, &mut rng);
            let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
            let w = ClassWeights(vec![0.5, 1.0, 2.0]);
            let base = ce_value(&logits, &labels, &w, CeNorm::WeightedMean);
            let mut up = logits.clone();
            up.data_mut()[row * 3 + labels[row]] += bump;
            prop_assert!(ce_value(&up, &labels, &w, CeNorm::WeightedMean) < base);
        }

        #[test]
        fn ce_invariant_to_weight_scale(seed in 0u64..1000, s in 0.01f64..100.0) {
            let mut rng = seeded_rng(seed);
            let logits = random_tensor(&[5, 3], 2.0, &mut rng);
            let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..3)).collect();
            let w = ClassWeights(vec![0.5, 1.0, 2.0]);
            let ws = ClassWeights(w.0.iter().map(|v| v * s).collect());
            let a = ce_value(&logits, &labels, &w, CeNorm::WeightedMean);
            let b = ce_value(&logits, &labels, &ws, CeNorm::WeightedMean);
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn dice_in_unit_range(seed in 0u64..1000) {
            let mut rng = seeded_rng(seed);
            let raw = random_tensor(&[6, 4], 3.0, &mut rng);
            let probs = Tensor::from_fn(&[6, 4], |i| {
                let r = i / 4;
                let z: f64 = raw.row(r).iter().map(|v| v.exp()).sum();
                raw.data()[i].exp() / z
            });
            let labels: Vec<usize> = (0..6).map(|_| rng.gen_range(0..4)).collect();
            for mode in [DiceMode::Macro, DiceMode::Binary] {
                let v = dice_value(&probs, &labels, mode);
                prop_assert!((0.0..=1.0 + 1e-6).contains(&v));
            }
        }

        #[test]
        fn weight_argmin_is_most_frequent(counts in prop::collection::vec(1u32..100_000, 2..8)) {
            let c: Vec<f64> = counts.iter().map(|&v| f64::from(v)).collect();
            let w = class_weights(&c).unwrap();
            let top = c.iter().copied().fold(0.0, f64::max);
            let amin = (0..w.len()).min_by(|&a, &b| w.0[a].total_cmp(&w.0[b])).unwrap();
            prop_assert_eq!(c[amin], top);
        }
    }
}
