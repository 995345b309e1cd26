//! Visibility-masked evaluation of point models, baselines and fixed predictors.

use osp_core::decoder::softmax_rows;
use osp_core::diffcore::Tensor;
use osp_core::math;
use osp_core::metrics::{miou, Confusion, MiouReport};

use crate::dataset::SceneData;
use crate::error::Result;
use crate::model::PointModel;

/// Classes left out of the mean IoU (empty space).
pub const EXCLUDE: [usize; 1] = [0];

/// Which visible voxels enter an evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Range {
    All,
    /// Centered box over this fraction of the x and y extent.
    Inner(f64),
    /// Complement of `Inner` within the scene.
    Annulus(f64),
}

impl Range {
    pub fn contains(&self, scene: &SceneData, voxel: usize) -> Result<bool> {
        Ok(match *self {
            Self::All => true,
            Self::Inner(f) => scene.grid.bounds.shrink_xy(f)?.contains(scene.grid.center(voxel)),
            Self::Annulus(f) => !scene.grid.bounds.shrink_xy(f)?.contains(scene.grid.center(voxel)),
        })
    }

    /// Visible voxels of the scene inside the range, ascending.
    pub fn voxels(&self, scene: &SceneData) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for i in scene.visible_voxels() {
            if self.contains(scene, i)? {
                out.push(i);
            }
        }
        Ok(out)
    }
}

/// Predictions of one scene at a set of voxels.
#[derive(Clone, Debug)]
pub struct ScenePrediction {
    pub voxels: Vec<usize>,
    /// `[voxels, classes]`.
    pub probs: Tensor,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub conf: Confusion,
    pub report: MiouReport,
    /// Executed point-layer evaluations over the full-mode count.
    pub relative_computation: f64,
    pub scenes: Vec<ScenePrediction>,
}

impl Evaluation {
    pub fn miou(&self) -> f64 {
        self.report.miou
    }
}

pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    (0..probs.rows()).map(|r| math::argmax(probs.row(r)) as u8).collect()
}

/// Confusion over predicted labels at `voxels` of each scene.
pub fn confusion(classes: usize, scenes: &[&SceneData], preds: &[(Vec<usize>, Vec<u8>)]) -> Result<Confusion> {
    let mut conf = Confusion::new(classes);
    for (s, (voxels, labels)) in scenes.iter().zip(preds) {
        let gt: Vec<u8> = voxels.iter().map(|&v| s.labels[v]).collect();
        conf.accumulate(labels, &gt, &vec![true; gt.len()])?;
    }
    Ok(conf)
}

pub fn evaluate_point(model: &PointModel, scenes: &[&SceneData], range: Range, threshold: Option<f64>, chunk: usize) -> Result<Evaluation> {
    let classes = model.spec.classes;
    let mut preds = Vec::with_capacity(scenes.len());
    let (mut active, mut total) = (0usize, 0usize);
    for s in scenes {
        let voxels = range.voxels(s)?;
        let out = model.predict(s, &voxels, threshold, chunk)?;
        active += out.active.iter().sum::<usize>();
        total += voxels.len() * out.active.len();
        let probs = softmax_rows(&out.logits);
        let labels = argmax_labels(&probs);
        preds.push(ScenePrediction { voxels, probs, labels });
    }
    let pairs: Vec<(Vec<usize>, Vec<u8>)> = preds.iter().map(|p| (p.voxels.clone(), p.labels.clone())).collect();
    let conf = confusion(classes, scenes, &pairs)?;
    Ok(Evaluation {
        report: miou(&conf, &EXCLUDE),
        conf,
        relative_computation: if total == 0 { 1.0 } else { active as f64 / total as f64 },
        scenes: preds,
    })
}

/// Most frequent label among the visible voxels of `scenes` (ties to the
/// lower class).
pub fn majority_class(scenes: &[&SceneData], classes: usize) -> u8 {
    let mut counts = vec![0u64; classes];
    for s in scenes {
        for i in s.visible_voxels() {
            counts[usize::from(s.labels[i])] += 1;
        }
    }
    let mut best = 0;
    for c in 1..classes {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best as u8
}

/// mIoU of predicting `label` at every voxel of the range.
pub fn evaluate_constant(scenes: &[&SceneData], classes: usize, range: Range, label: u8) -> Result<MiouReport> {
    let mut pairs = Vec::new();
    for s in scenes {
        let v = range.voxels(s)?;
        let n = v.len();
        pairs.push((v, vec![label; n]));
    }
    Ok(miou(&confusion(classes, scenes, &pairs)?, &EXCLUDE))
}
