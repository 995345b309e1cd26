//! Evaluation experiments built from trained models: range generalization
//! and refinement of the volume baseline.

use osp_core::diffcore::Tensor;
use osp_core::metrics::{miou, MiouReport};
use osp_core::refine::{adaptive_region, box_region, fuse, FuseMode, RegionMode, VolumePrediction};

use crate::dataset::SceneData;
use crate::error::{OspError, Result};
use crate::eval::{confusion, evaluate_constant, evaluate_point, majority_class, Evaluation, Range, EXCLUDE};
use crate::model::{BaselineModel, PointModel};
use crate::report::Report;

/// Point-model mIoU inside the inner box, over the whole scene and on the
/// annulus outside the box, with the majority-class reference on each.
pub struct BeyondOutcome {
    pub inner: f64,
    pub ranges: Vec<(&'static str, MiouReport, MiouReport)>,
    pub annulus_voxels: usize,
}

impl BeyondOutcome {
    pub fn get(&self, name: &str) -> &MiouReport {
        &self.ranges.iter().find(|r| r.0 == name).expect("known range").1
    }

    pub fn report(&self) -> Report {
        let mut r = Report::new("beyond-range evaluation");
        r.push_f("inner_fraction", self.inner);
        r.push("annulus_voxels", self.annulus_voxels);
        for (name, model, majority) in &self.ranges {
            r.push_miou(name, model);
            r.push_f(&format!("{name}.majority_miou"), majority.miou);
        }
        if self.annulus_voxels == 0 {
            r.push("note", "annulus is empty; no evaluable region beyond the inner box");
        }
        r
    }
}

pub fn beyond(model: &PointModel, train: &[&SceneData], val: &[&SceneData], inner: f64, chunk: usize) -> Result<BeyondOutcome> {
    let classes = model.spec.classes;
    let majority = majority_class(train, classes);
    let mut ranges = Vec::new();
    for (name, range) in [("inner", Range::Inner(inner)), ("full", Range::All), ("annulus", Range::Annulus(inner))] {
        let ev = evaluate_point(model, val, range, None, chunk)?;
        ranges.push((name, ev.report, evaluate_constant(val, classes, range, majority)?));
    }
    let mut annulus_voxels = 0;
    for s in val {
        annulus_voxels += Range::Annulus(inner).voxels(s)?.len();
    }
    Ok(BeyondOutcome {
        inner,
        ranges,
        annulus_voxels,
    })
}

/// One fused configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineRow {
    pub region: RegionMode,
    pub lambda: f64,
    /// Region voxels over all grid voxels, averaged over scenes.
    pub selected_fraction: f64,
    pub miou: f64,
}

pub struct RefineOutcome {
    pub baseline_miou: f64,
    pub point_miou: f64,
    pub rows: Vec<RefineRow>,
    /// Fused labels of every scene for the first row.
    pub first_grids: Vec<Vec<u8>>,
}

fn region_name(r: &RegionMode) -> String {
    match r {
        RegionMode::Box(s) => format!("box:{s}"),
        RegionMode::Threshold(t) => format!("threshold:{t}"),
        RegionMode::TopFraction(f) => format!("top:{f}"),
    }
}

impl RefineOutcome {
    pub fn report(&self, mode: FuseMode) -> Report {
        let mut r = Report::new("refinement of the volume baseline");
        r.push("fusion", if mode == FuseMode::Logit { "logit" } else { "probability" });
        r.push_f("baseline.miou", self.baseline_miou);
        r.push_f("point.miou", self.point_miou);
        for row in &self.rows {
            let key = format!("fused.{}.lambda:{}", region_name(&row.region), row.lambda);
            r.push_f(&format!("{key}.miou"), row.miou);
            r.push_f(&format!("{key}.selected_fraction"), row.selected_fraction);
        }
        r
    }
}

/// Volume predictions over whole grids and point predictions on visible voxels.
pub struct RefineInputs {
    pub volumes: Vec<VolumePrediction>,
    pub points: Evaluation,
}

pub fn refine_inputs(point: &PointModel, base: &BaselineModel, scenes: &[&SceneData], chunk: usize, points: Option<Evaluation>) -> Result<RefineInputs> {
    let volumes = scenes
        .iter()
        .map(|s| base.predict_volume(s, &base.level0(s)?))
        .collect::<Result<Vec<_>>>()?;
    let points = match points {
        Some(p) => p,
        None => evaluate_point(point, scenes, Range::All, None, chunk)?,
    };
    if points.scenes.len() != scenes.len() {
        return Err(OspError::Data("point predictions do not match the scene list".into()));
    }
    Ok(RefineInputs { volumes, points })
}

/// Fuses point predictions into the baseline for every region and weight;
/// only visible voxels are scored, so point predictions are needed only there.
pub fn refine(inputs: &RefineInputs, scenes: &[&SceneData], regions: &[RegionMode], lambdas: &[f64], mode: FuseMode) -> Result<RefineOutcome> {
    let classes = inputs.volumes.first().map_or(0, |v| v.probs.cols());
    let vis: Vec<Vec<usize>> = scenes.iter().map(|s| s.visible_voxels()).collect();
    let score = |grids: &[Vec<u8>]| -> Result<f64> {
        let pairs: Vec<(Vec<usize>, Vec<u8>)> = vis.iter().zip(grids).map(|(v, g)| (v.clone(), v.iter().map(|&i| g[i]).collect())).collect();
        Ok(miou(&confusion(classes, scenes, &pairs)?, &EXCLUDE).miou)
    };
    let base_grids: Vec<Vec<u8>> = inputs.volumes.iter().map(VolumePrediction::labels).collect();
    let mut rows = Vec::new();
    let mut first_grids = Vec::new();
    for region in regions {
        // region voxels per scene, restricted to visible ones with point rows
        let mut selected = Vec::with_capacity(scenes.len());
        let mut frac = 0.0;
        for (k, s) in scenes.iter().enumerate() {
            let r = match region {
                RegionMode::Box(side) => box_region(&s.grid, *side)?,
                _ => adaptive_region(&inputs.volumes[k], *region)?,
            };
            frac += r.voxels.len() as f64 / s.grid.len() as f64;
            let pv = &inputs.points.scenes[k];
            let mut voxels = Vec::new();
            let mut rows_idx = Vec::new();
            for &v in &r.voxels {
                if let Ok(j) = pv.voxels.binary_search(&v) {
                    voxels.push(v);
                    rows_idx.push(j);
                }
            }
            let c = pv.probs.cols();
            let probs = Tensor::from_fn(&[rows_idx.len(), c], |i| pv.probs.row(rows_idx[i / c])[i % c]);
            selected.push((voxels, probs));
        }
        frac /= scenes.len().max(1) as f64;
        for &lambda in lambdas {
            let grids = inputs
                .volumes
                .iter()
                .zip(&selected)
                .map(|(vol, (voxels, probs))| Ok(fuse(vol, probs, voxels, lambda, mode)?))
                .collect::<Result<Vec<_>>>()?;
            rows.push(RefineRow {
                region: *region,
                lambda,
                selected_fraction: frac,
                miou: score(&grids)?,
            });
            if first_grids.is_empty() {
                first_grids = grids;
            }
        }
    }
    Ok(RefineOutcome {
        baseline_miou: score(&base_grids)?,
        point_miou: inputs.points.miou(),
        rows,
        first_grids,
    })
}
