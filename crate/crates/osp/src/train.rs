//! Training loops for the point model and the volume baseline.

use std::time::Instant;

use osp_core::diffcore::{AdamState, AdamW, Graph, Tensor};
use osp_core::geometry::SceneBounds;
use osp_core::losses::{class_weights, total_loss, CeNorm, ClassWeights, DiceMode, LossConfig};
use osp_core::math::{self, Vec3};
use osp_core::metrics::{miou, Confusion};
use osp_core::poi::{perturb, sample_training_pois};
use osp_core::refine::VolumeBaseline;
use osp_core::synthworld::FeaturePyramid;
use osp_core::{seeded_rng, SeededRng};
use rand::seq::SliceRandom;

use crate::config::{BaselineConfig, TrainConfig};
use crate::dataset::SceneData;
use crate::error::{OspError, Result};
use crate::eval::{evaluate_point, Evaluation, Range, EXCLUDE};
use crate::model::{is_stem_param, BaselineModel, PointModel};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub train_miou: f64,
    pub val_miou: Option<f64>,
    pub seconds: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let val = self.val_miou.map_or_else(|| String::from("-"), |v| format!("{v:.6}"));
        format!(
            "epoch={} steps={} loss={:.6} train_miou={:.6} val_miou={} wall={:.2}s",
            self.epoch, self.steps, self.loss, self.train_miou, val, self.seconds
        )
    }
}

pub struct TrainOutcome {
    /// Parameters at the best validation mIoU, or the last finite state
    /// when training diverged.
    pub model: PointModel,
    pub adam: AdamState,
    pub best_epoch: Option<usize>,
    pub best_eval: Option<Evaluation>,
    pub log: Vec<EpochLog>,
    /// Epoch and step (1-based) of a non-finite loss or gradient.
    pub diverged: Option<(usize, usize)>,
    pub weights: ClassWeights,
}

impl TrainOutcome {
    pub fn best_val(&self) -> Option<f64> {
        self.best_eval.as_ref().map(Evaluation::miou)
    }
}

/// Visible voxels of a scene that may be used for training.
pub fn training_mask(scene: &SceneData, inner: Option<f64>) -> Result<Vec<bool>> {
    let region: Option<SceneBounds> = inner.map(|f| scene.grid.bounds.shrink_xy(f)).transpose()?;
    Ok((0..scene.labels.len())
        .map(|i| scene.visible[i] && region.as_ref().is_none_or(|b| b.contains(scene.grid.center(i))))
        .collect())
}

/// Inverse-log class weights from label counts over the training masks.
pub fn dataset_weights(scenes: &[&SceneData], masks: &[Vec<bool>], classes: usize) -> Result<ClassWeights> {
    let mut counts = vec![0.0; classes];
    for (s, m) in scenes.iter().zip(masks) {
        for (i, &on) in m.iter().enumerate() {
            if on {
                counts[usize::from(s.labels[i])] += 1.0;
            }
        }
    }
    Ok(class_weights(&counts)?)
}

/// Training points of one step with their labels; jittered points take the
/// label of the voxel they land in.
fn sample_step(scene: &SceneData, mask: &[bool], count: usize, radius: f64, rng: &mut SeededRng) -> Result<(Vec<Vec3>, Vec<usize>)> {
    let base = sample_training_pois(mask, &scene.grid, count, rng)?;
    let moved = perturb(&base, radius, rng)?;
    let origin = base.origin_index.clone().unwrap_or_default();
    let labels = moved
        .points
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let v = scene.grid.voxel_at(p).unwrap_or(origin[k]);
            usize::from(scene.labels[v])
        })
        .collect();
    Ok((moved.points, labels))
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

fn add_into(acc: &mut Option<Vec<Tensor>>, grads: Vec<Tensor>) -> Result<()> {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(&grads) {
                for (p, q) in x.data_mut().iter_mut().zip(g.data()) {
                    *p += q;
                }
            }
        }
    }
    Ok(())
}

fn argmax_row(t: &Tensor, r: usize) -> u8 {
    math::argmax(t.row(r)) as u8
}

pub fn loss_config(dice: bool) -> LossConfig {
    LossConfig {
        ce_norm: CeNorm::WeightedMean,
        dice: dice.then_some(DiceMode::Macro),
    }
}

/// Trains a freshly initialized point model. `on_epoch` sees every log
/// record as soon as it is complete.
pub fn train_points(
    cfg: &TrainConfig,
    classes: usize,
    train: &[&SceneData],
    val: &[&SceneData],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(OspError::Usage("training needs at least one training and one validation scene".into()));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut model = PointModel::new(cfg.model_spec(classes), cfg.seed)?;
    let masks = train.iter().map(|s| training_mask(s, cfg.inner)).collect::<Result<Vec<_>>>()?;
    let weights = dataset_weights(train, &masks, classes)?;
    let lcfg = loss_config(cfg.dice);
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let scales: Vec<f64> = model
        .store
        .iter()
        .map(|(_, n, _)| if is_stem_param(n) { cfg.stem_lr_mult } else { 1.0 })
        .collect();
    let mut adam = AdamState::new(&model.store);
    let mut best: Option<(usize, PointModel, AdamState, Evaluation)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut conf = Confusion::new(classes);
        let (mut loss_sum, mut steps) = (0.0, 0);
        for batch in order.chunks(cfg.batch_scenes) {
            steps += 1;
            let mut acc = None;
            let mut finite = true;
            for &si in batch {
                let scene = train[si];
                let (points, labels) = sample_step(scene, &masks[si], cfg.points, cfg.perturb, &mut rng)?;
                let mut g = Graph::new();
                let b = model.store.bind(&mut g, |_| true);
                let pyr = model.pyramid(&mut g, &b, scene)?;
                let prep = model.decoder.prepare(&mut g, &b, &pyr)?;
                let out = model.decoder.forward(&mut g, &b, &prep, &points, &scene.grid.bounds, &scene.rig)?;
                let loss = total_loss(&mut g, out.logits, &labels, &weights, lcfg)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    finite = false;
                    break;
                }
                loss_sum += lv;
                let logits = g.value(out.logits);
                let pred: Vec<u8> = (0..labels.len()).map(|r| argmax_row(logits, r)).collect();
                let gt: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
                conf.accumulate(&pred, &gt, &vec![true; gt.len()])?;
                let mut grads = g.backward(loss)?;
                let grads = b.grads(&mut grads);
                if !all_finite(&grads) {
                    finite = false;
                    break;
                }
                add_into(&mut acc, grads)?;
            }
            if !finite {
                return Ok(TrainOutcome {
                    model,
                    adam,
                    best_epoch: None,
                    best_eval: None,
                    log,
                    diverged: Some((epoch, steps)),
                    weights,
                });
            }
            if cfg.lr > 0.0 {
                let grads = acc.expect("batch has scenes");
                opt.step(&mut model.store, &grads, &mut adam, cfg.lr, &scales)?;
            }
        }
        let validate = epoch == cfg.epochs || (cfg.val_every > 0 && epoch % cfg.val_every == 0);
        let val_eval = if validate {
            Some(evaluate_point(&model, val, Range::All, None, cfg.chunk)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            steps,
            loss: loss_sum / train.len() as f64,
            train_miou: miou(&conf, &EXCLUDE).miou,
            val_miou: val_eval.as_ref().map(Evaluation::miou),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if let Some(ev) = val_eval {
            if best.as_ref().is_none_or(|b| ev.miou() > b.3.miou()) {
                best = Some((epoch, model.clone(), adam.clone(), ev));
            }
        }
    }
    let (epoch, model, adam, ev) = best.expect("last epoch validates");
    Ok(TrainOutcome {
        model,
        adam,
        best_epoch: Some(epoch),
        best_eval: Some(ev),
        log,
        diverged: None,
        weights,
    })
}

pub struct BaselineOutcome {
    pub model: BaselineModel,
    pub log: Vec<EpochLog>,
    pub diverged: Option<(usize, usize)>,
}

/// Trains the volume baseline on the frozen stem of `point`; only
/// `volume.*` parameters change.
pub fn train_baseline(
    cfg: &BaselineConfig,
    point: &PointModel,
    train: &[&SceneData],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<BaselineOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(OspError::Usage("baseline training needs at least one scene".into()));
    }
    let classes = point.spec.classes;
    let mut rng = seeded_rng(cfg.seed);
    let mut model = BaselineModel::new(point, cfg.hidden, cfg.seed)?;
    let masks = train.iter().map(|s| training_mask(s, None)).collect::<Result<Vec<_>>>()?;
    let weights = dataset_weights(train, &masks, classes)?;
    let lcfg = loss_config(cfg.dice);
    let features = train.iter().map(|s| model.level0(s)).collect::<Result<Vec<_>>>()?;
    let opt = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    // zero scale freezes the copied stem, including its weight decay
    let scales: Vec<f64> = model
        .store
        .iter()
        .map(|(_, n, _)| if VolumeBaseline::param_prefix(n) { 1.0 } else { 0.0 })
        .collect();
    let mut adam = AdamState::new(&model.store);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut conf = Confusion::new(classes);
        let mut loss_sum = 0.0;
        for (step, &si) in order.iter().enumerate() {
            let scene = train[si];
            let (points, labels) = sample_step(scene, &masks[si], cfg.points, 0.0, &mut rng)?;
            let mut g = Graph::new();
            let b = model.store.bind(&mut g, VolumeBaseline::param_prefix);
            let pyr = FeaturePyramid {
                maps: features[si].iter().map(|m| vec![g.constant(m.clone())]).collect(),
            };
            let logits = model.base.forward(&mut g, &b, &pyr, &points, &scene.grid.bounds, &scene.rig)?;
            let loss = total_loss(&mut g, logits, &labels, &weights, lcfg)?;
            let lv = g.value(loss).item();
            let mut grads = g.backward(loss)?;
            let grads = b.grads(&mut grads);
            if !lv.is_finite() || !all_finite(&grads) {
                return Ok(BaselineOutcome {
                    model,
                    log,
                    diverged: Some((epoch, step + 1)),
                });
            }
            loss_sum += lv;
            let lt = g.value(logits);
            let pred: Vec<u8> = (0..labels.len()).map(|r| argmax_row(lt, r)).collect();
            let gt: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
            conf.accumulate(&pred, &gt, &vec![true; gt.len()])?;
            if cfg.lr > 0.0 {
                opt.step(&mut model.store, &grads, &mut adam, cfg.lr, &scales)?;
            }
        }
        let entry = EpochLog {
            epoch,
            steps: order.len(),
            loss: loss_sum / order.len() as f64,
            train_miou: miou(&conf, &EXCLUDE).miou,
            val_miou: None,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(BaselineOutcome { model, log, diverged: None })
}
