//! Volume baseline and point-decoder refinement of its predictions.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::decoder::{deform_sample, AttnShape, HitPairs, Mlp};
use crate::diffcore::{Bound, Graph, ParamSink, Tensor, Var};
use crate::error::{bail, Result};
use crate::geometry::{normalize_points, CameraRig, GridSpec, SceneBounds};
use crate::math::{self, Vec3};
use crate::poi::{select_least_confident, select_uncertain};
use crate::synthworld::FeaturePyramid;

/// Per-voxel class distributions of a whole grid, `[voxels, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePrediction {
    pub probs: Tensor,
}

impl VolumePrediction {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 {
            bail!(Contract, "volume probabilities must be [voxels, classes]");
        }
        for r in 0..probs.rows() {
            let s: f64 = probs.row(r).iter().sum();
            if !(math::abs(s - 1.0) <= 1e-6) {
                bail!(Contract, "voxel {} probabilities sum to {}", r, s);
            }
        }
        Ok(Self { probs })
    }

    pub fn labels(&self) -> Vec<u8> {
        (0..self.probs.rows()).map(|r| math::argmax(self.probs.row(r)) as u8).collect()
    }
}

/// A deliberately simple volume predictor: each voxel averages the level-0
/// features at its projections into the views that see it, appends its
/// normalized coordinates, and an MLP maps that to class logits.
#[derive(Clone, Debug)]
pub struct VolumeBaseline {
    pub d: usize,
    pub mlp: Mlp,
}

impl VolumeBaseline {
    pub fn init<R: Rng + ?Sized>(store: &mut dyn ParamSink, d: usize, hidden: usize, classes: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            d,
            mlp: Mlp::init(store, "volume", [d + 3, hidden, classes], rng)?,
        })
    }

    pub fn attach(store: &crate::diffcore::ParamStore, d: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::init(&mut crate::diffcore::Attach(store), d, hidden, classes, &mut crate::seeded_rng(0))
    }

    pub fn param_prefix(name: &str) -> bool {
        name.starts_with("volume.")
    }

    /// Mean level-0 feature over the hit views of each point, `[N, d]`;
    /// zero for points no camera sees.
    pub fn pooled_features(&self, g: &mut Graph, pyramid: &FeaturePyramid, points: &[Vec3], rig: &CameraRig) -> Result<Var> {
        let n = points.len();
        let hits = HitPairs::compute(points, &rig.cameras);
        if hits.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[n, self.d])));
        }
        let shape = AttnShape {
            d: self.d,
            heads: 1,
            levels: 1,
            samples: 1,
        };
        let level0: Vec<Vec<Var>> = pyramid.maps.iter().map(|v| vec![v[0]]).collect();
        let p = hits.len();
        let uv = g.constant(hits.uv_tensor());
        let off = g.constant(Tensor::zeros(&[p, 2]));
        let w = g.constant(Tensor::full(&[p, 1], 1.0));
        let s = deform_sample(g, shape, &level0, hits.view.clone(), uv, off, w)?;
        g.segment_reduce(s, hits.point, n, true)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        pyramid: &FeaturePyramid,
        points: &[Vec3],
        bounds: &SceneBounds,
        rig: &CameraRig,
    ) -> Result<Var> {
        let feats = self.pooled_features(g, pyramid, points, rig)?;
        let norm = normalize_points(points, bounds)?;
        let xyz = g.constant(Tensor::from_fn(&[points.len(), 3], |i| norm[i / 3][i % 3]));
        let x = g.concat(&[feats, xyz], 1)?;
        self.mlp.apply(g, b, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    /// Weighted sum of probabilities.
    Probability,
    /// Weighted sum of log-probabilities.
    Logit,
}

/// Fused distributions: rows listed in `region` become the weighted sum
/// `(1 - lambda) volume + lambda point` (point row `i` belongs to voxel
/// `region[i]`); all other rows are copied.
pub fn fuse_probs(volume: &VolumePrediction, point: &Tensor, region: &[usize], lambda: f64, mode: FuseMode) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        bail!(Config, "fusion weight must be in [0, 1], got {}", lambda);
    }
    let c = volume.probs.cols();
    if point.rank() != 2 || point.rows() != region.len() || point.cols() != c {
        return Err(crate::Error::Shape {
            op: "fuse",
            left: point.dims().to_vec(),
            right: vec![region.len(), c],
        });
    }
    let mut out = volume.probs.clone();
    for (i, &v) in region.iter().enumerate() {
        if v >= volume.probs.rows() {
            bail!(Contract, "region voxel {} outside the grid", v);
        }
        let dst = &mut out.data_mut()[v * c..(v + 1) * c];
        let p = point.row(i);
        match mode {
            FuseMode::Probability => {
                for j in 0..c {
                    dst[j] = (1.0 - lambda) * dst[j] + lambda * p[j];
                }
            }
            FuseMode::Logit => {
                for j in 0..c {
                    dst[j] = (1.0 - lambda) * math::ln(dst[j].max(1e-12)) + lambda * math::ln(p[j].max(1e-12));
                }
                let m = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = dst.iter().map(|&x| math::exp(x - m)).sum();
                dst.iter_mut().for_each(|x| *x = math::exp(*x - m) / z);
            }
        }
    }
    Ok(out)
}

/// Argmax labels after [`fuse_probs`].
pub fn fuse(volume: &VolumePrediction, point: &Tensor, region: &[usize], lambda: f64, mode: FuseMode) -> Result<Vec<u8>> {
    let fused = fuse_probs(volume, point, region, lambda, mode)?;
    Ok((0..fused.rows()).map(|r| math::argmax(fused.row(r)) as u8).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RegionMode {
    /// Ego-centered square prism of the given side in meters, full height.
    Box(f64),
    /// Voxels whose top volume probability is below the threshold.
    Threshold(f64),
    /// The given fraction of least confident voxels.
    TopFraction(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineRegion {
    pub mode: RegionMode,
    /// Selected voxels, ascending.
    pub voxels: Vec<usize>,
}

pub fn box_region(grid: &GridSpec, side: f64) -> Result<RefineRegion> {
    if !(side >= 0.0) {
        bail!(Config, "box side must be non-negative, got {}", side);
    }
    let h = 0.5 * side;
    let voxels = (0..grid.len())
        .filter(|&i| {
            let c = grid.center(i);
            math::abs(c[0]) <= h && math::abs(c[1]) <= h
        })
        .collect();
    Ok(RefineRegion {
        mode: RegionMode::Box(side),
        voxels,
    })
}

pub fn adaptive_region(volume: &VolumePrediction, mode: RegionMode) -> Result<RefineRegion> {
    let voxels = match mode {
        RegionMode::Threshold(t) => select_uncertain(&volume.probs, t)?,
        RegionMode::TopFraction(f) => select_least_confident(&volume.probs, f)?,
        RegionMode::Box(_) => bail!(Config, "box regions are built with box_region"),
    };
    Ok(RefineRegion { mode, voxels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{adaptive_region_check, random_volume};
    use crate::decoder::softmax_rows;
    use crate::diffcore::ParamStore;
    use crate::error::Error;
    use crate::gradcheck::random_tensor;
    use crate::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn fuse_extremes_and_average() {
        let vol = random_volume(1, 30, 4, 3.0);
        let point = softmax_rows(&random_tensor(&[10, 4], 3.0, &mut seeded_rng(2)));
        let region: Vec<usize> = (5..15).collect();
        assert_eq!(fuse(&vol, &point, &region, 0.0, FuseMode::Probability).unwrap(), vol.labels());
        let full = fuse(&vol, &point, &region, 1.0, FuseMode::Probability).unwrap();
        for (i, &v) in region.iter().enumerate() {
            assert_eq!(usize::from(full[v]), math::argmax(point.row(i)));
        }
        let half = fuse_probs(&vol, &point, &region, 0.5, FuseMode::Probability).unwrap();
        for v in 0..30 {
            for j in 0..4 {
                let expect = match region.iter().position(|&r| r == v) {
                    Some(i) => (vol.probs.row(v)[j] + point.row(i)[j]) / 2.0,
                    None => vol.probs.row(v)[j],
                };
                assert!((half.row(v)[j] - expect).abs() < 1e-15);
            }
        }
        assert!(matches!(fuse(&vol, &point, &region, 1.5, FuseMode::Probability), Err(Error::Config(_))));
    }

    #[test]
    fn logit_fusion_is_normalized_geometric_mean() {
        let vol = random_volume(3, 6, 3, 2.0);
        let point = softmax_rows(&random_tensor(&[2, 3], 2.0, &mut seeded_rng(4)));
        let out = fuse_probs(&vol, &point, &[1, 4], 0.5, FuseMode::Logit).unwrap();
        for (i, v) in [1usize, 4].into_iter().enumerate() {
            let raw: Vec<f64> = (0..3).map(|j| (vol.probs.row(v)[j] * point.row(i)[j]).sqrt()).collect();
            let z: f64 = raw.iter().sum();
            for j in 0..3 {
                assert!((out.row(v)[j] - raw[j] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adaptive_region_cases() {
        let confident = VolumePrediction::new(Tensor::from_fn(&[5, 3], |i| f64::from(u8::from(i % 3 == 0)))).unwrap();
        let r = adaptive_region(&confident, RegionMode::Threshold(0.9)).unwrap();
        assert!(r.voxels.is_empty());
        let empty = Tensor::zeros(&[0, 3]);
        assert_eq!(fuse(&confident, &empty, &r.voxels, 0.5, FuseMode::Probability).unwrap(), confident.labels());
        let all = adaptive_region(&confident, RegionMode::TopFraction(1.0)).unwrap();
        assert_eq!(all.voxels, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn adaptive_region_matches_sort_oracle() {
        let c = adaptive_region_check(50);
        assert!(c.passed(0.0), "{c:?}");
    }

    #[test]
    fn ties_prefer_lower_index() {
        let vol = VolumePrediction::new(Tensor::full(&[6, 2], 0.5)).unwrap();
        let r = adaptive_region(&vol, RegionMode::TopFraction(0.5)).unwrap();
        assert_eq!(r.voxels, vec![0, 1, 2]);
    }

    #[test]
    fn box_regions_nest_and_cover() {
        let grid = GridSpec::with_voxel_size(SceneBounds::new([-10.0, -10.0, -1.5], [10.0, 10.0, 2.5]).unwrap(), 0.5).unwrap();
        let full = box_region(&grid, 20.0).unwrap();
        assert_eq!(full.voxels.len(), grid.len());
        let half = box_region(&grid, 10.0).unwrap();
        assert_eq!(half.voxels.len(), 20 * 20 * 8);
        let small = box_region(&grid, 4.0).unwrap();
        assert!(small.voxels.iter().all(|v| half.voxels.binary_search(v).is_ok()));
    }

    #[test]
    fn zero_baseline_is_uniform() {
        let mut store = ParamStore::new();
        let base = VolumeBaseline::init(&mut store, 6, 8, 4, &mut seeded_rng(1)).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let rig = CameraRig::default_surround();
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let maps = rig
            .cameras
            .iter()
            .map(|_| vec![g.constant(random_tensor(&[16, 24, 6], 1.0, &mut seeded_rng(2)))])
            .collect();
        let pyr = FeaturePyramid { maps };
        let bounds = SceneBounds::new([-10.0, -10.0, -1.5], [10.0, 10.0, 2.5]).unwrap();
        let pts = [[3.0, 0.5, 0.0], [0.0, -4.0, 1.0], [0.0, 0.0, 2.4]];
        let logits = base.forward(&mut g, &b, &pyr, &pts, &bounds, &rig).unwrap();
        let probs = softmax_rows(g.value(logits));
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        VolumePrediction::new(probs).unwrap();
    }

    #[test]
    fn pooled_features_average_hit_views() {
        let rig = CameraRig::default_surround();
        let mut store = ParamStore::new();
        let base = VolumeBaseline::init(&mut store, 2, 4, 3, &mut seeded_rng(1)).unwrap();
        let mut g = Graph::new();
        let maps: Vec<Tensor> = (0..4).map(|v| Tensor::full(&[16, 24, 2], v as f64 + 1.0)).collect();
        let pyr = FeaturePyramid {
            maps: maps.iter().map(|m| vec![g.constant(m.clone())]).collect(),
        };
        // on the 45 degree diagonal both front and left cameras see the point
        let pts = [[4.0, 4.0, 0.0], [4.0, 0.0, 0.0]];
        let f = base.pooled_features(&mut g, &pyr, &pts, &rig).unwrap();
        let v = g.value(f);
        assert_eq!(crate::geometry::hit_views(pts[0], &rig), vec![0, 1]);
        assert!((v.row(0)[0] - 1.5).abs() < 1e-12);
        assert!((v.row(1)[0] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fusion_preserves_outside_and_validity(seed in 0u64..1000, lambda in 0.0f64..=1.0, logit in any::<bool>()) {
            let vol = random_volume(seed, 20, 4, 3.0);
            let region: Vec<usize> = (0..20).filter(|i| (i * 7 + seed as usize) % 3 == 0).collect();
            let point = softmax_rows(&random_tensor(&[region.len(), 4], 3.0, &mut seeded_rng(seed + 1)));
            let mode = if logit { FuseMode::Logit } else { FuseMode::Probability };
            let out = fuse_probs(&vol, &point, &region, lambda, mode).unwrap();
            let labels = fuse(&vol, &point, &region, lambda, mode).unwrap();
            let base = vol.labels();
            for v in 0..20 {
                let s: f64 = out.row(v).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                if !region.contains(&v) {
                    prop_assert_eq!(out.row(v), vol.probs.row(v));
                    prop_assert_eq!(labels[v], base[v]);
                }
            }
        }
    }
}
