//! Visibility-masked confusion counts and mean IoU.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Per-class true positive, false positive and false negative counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Voxels counted so far.
    pub evaluated: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            evaluated: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds every voxel where `visible` is set.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], visible: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != visible.len() {
            bail!(
                Contract,
                "grid sizes differ: pred {}, gt {}, mask {}",
                pred.len(),
                gt.len(),
                visible.len()
            );
        }
        let m = self.classes();
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| usize::from(c) >= m) {
            bail!(Contract, "label {} out of range for {} classes", bad, m);
        }
        for ((&p, &g), _) in pred.iter().zip(gt).zip(visible).filter(|(_, &v)| v) {
            let (p, g) = (usize::from(p), usize::from(g));
            if p == g {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
            self.evaluated += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if other.classes() != self.classes() {
            bail!(Contract, "cannot merge {} and {} classes", self.classes(), other.classes());
        }
        for c in 0..self.classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.evaluated += other.evaluated;
        Ok(())
    }

    /// IoU of one class, `None` when it never occurs in either grid.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let denom = self.tp[class] + self.fp[class] + self.fn_[class];
        (denom > 0).then(|| self.tp[class] as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for excluded classes and classes absent from both grids.
    pub per_class: Vec<Option<f64>>,
    /// False when no class entered the mean; `miou` is then 0.
    pub evaluable: bool,
}

pub fn miou(conf: &Confusion, exclude: &[usize]) -> MiouReport {
    let per_class: Vec<Option<f64>> = (0..conf.classes())
        .map(|c| if exclude.contains(&c) { None } else { conf.iou(c) })
        .collect();
    let values: Vec<f64> = per_class.iter().flatten().copied().collect();
    let evaluable = !values.is_empty();
    let miou = if evaluable {
        values.iter().sum::<f64>() / values.len() as f64
    } else {
        0.0
    };
    MiouReport {
        miou,
        per_class,
        evaluable,
    }
}
