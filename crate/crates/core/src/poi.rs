//! Points of interest: the query locations handed to the decoder.

use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{bail, Result};
use crate::geometry::{GridSpec, SceneBounds};
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoiKind {
    /// Voxel centers of the evaluation grid.
    Standard,
    /// Re-queried uncertain points.
    Adaptive,
    /// Caller-chosen locations, possibly outside the training range.
    Manual,
}

impl PoiKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoiKind::Standard => "standard",
            PoiKind::Adaptive => "adaptive",
            PoiKind::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(PoiKind::Standard),
            "adaptive" => Some(PoiKind::Adaptive),
            "manual" => Some(PoiKind::Manual),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoiSet {
    pub points: Vec<Vec3>,
    pub kind: PoiKind,
    /// Source voxel of each point, when the points came from a grid.
    pub origin_index: Option<Vec<usize>>,
}

impl PoiSet {
    pub fn manual(points: Vec<Vec3>) -> Self {
        Self {
            points,
            kind: PoiKind::Manual,
            origin_index: None,
        }
    }

    /// Centers of the given voxels, in the given order.
    pub fn from_voxels(grid: &GridSpec, voxels: Vec<usize>) -> Self {
        Self {
            points: voxels.iter().map(|&i| grid.center(i)).collect(),
            kind: PoiKind::Standard,
            origin_index: Some(voxels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset by position, keeping kind and origins.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            points: rows.iter().map(|&r| self.points[r]).collect(),
            kind: self.kind,
            origin_index: self.origin_index.as_ref().map(|o| rows.iter().map(|&r| o[r]).collect()),
        }
    }

    /// Points as an `[N, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.len(), 3], |i| self.points[i / 3][i % 3])
    }
}

pub fn grid_centers(grid: &GridSpec) -> PoiSet {
    PoiSet::from_voxels(grid, (0..grid.len()).collect())
}

/// Jitters every coordinate by an independent uniform draw from
/// `[-radius, radius]`, drawing x, y, z per point in order.
pub fn perturb<R: Rng + ?Sized>(pois: &PoiSet, radius: f64, rng: &mut R) -> Result<PoiSet> {
    if !(radius >= 0.0) {
        bail!(Config, "perturbation radius must be non-negative, got {}", radius);
    }
    let mut out = pois.clone();
    if radius > 0.0 {
        for p in &mut out.points {
            for v in p.iter_mut() {
                *v += rng.gen_range(-radius..=radius);
            }
        }
    }
    Ok(out)
}

/// Draws `count` visible voxel centers uniformly; without replacement unless
/// fewer than `count` voxels are visible.
pub fn sample_training_pois<R: Rng + ?Sized>(visible: &[bool], grid: &GridSpec, count: usize, rng: &mut R) -> Result<PoiSet> {
    if visible.len() != grid.len() {
        bail!(Contract, "visibility mask has {} entries, grid has {}", visible.len(), grid.len());
    }
    if count == 0 {
        bail!(Config, "PoI count must be positive");
    }
    let pool: Vec<usize> = (0..visible.len()).filter(|&i| visible[i]).collect();
    if pool.is_empty() {
        bail!(Data, "no visible voxels to sample from");
    }
    let picked: Vec<usize> = if pool.len() >= count {
        rand::seq::index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..count).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    Ok(PoiSet::from_voxels(grid, picked))
}

/// Centers of the `outer` voxel grid that lie outside `inner`.
pub fn manual_range(inner: &SceneBounds, outer: &SceneBounds, voxel_size: f64) -> Result<PoiSet> {
    if !outer.contains_box(inner) {
        bail!(Config, "inner range is not contained in the outer range");
    }
    let grid = GridSpec::with_voxel_size(*outer, voxel_size)?;
    let voxels: Vec<usize> = (0..grid.len()).filter(|&i| !inner.contains(grid.center(i))).collect();
    if voxels.is_empty() {
        bail!(Config, "inner range leaves no voxels outside it");
    }
    let mut set = PoiSet::from_voxels(&grid, voxels);
    set.kind = PoiKind::Manual;
    Ok(set)
}

fn checked_row_max(probs: &Tensor) -> Result<Vec<(usize, f64)>> {
    if probs.rank() != 2 {
        bail!(Contract, "class distributions must be [N, C], got {:?}", probs.dims());
    }
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            if !(libm::fabs(sum - 1.0) <= 1e-6) || row.iter().any(|&p| !(p >= 0.0)) {
                bail!(Contract, "row {} is not a distribution (sum {})", r, sum);
            }
            Ok((r, row.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
        })
        .collect()
}

/// Rows whose top probability is below `threshold`, ascending.
pub fn select_uncertain(probs: &Tensor, threshold: f64) -> Result<Vec<usize>> {
    Ok(checked_row_max(probs)?
        .into_iter()
        .filter(|&(_, m)| m < threshold)
        .map(|(r, _)| r)
        .collect())
}

/// The `round(fraction * N)` least confident rows, ascending by index.
/// Equal confidences are broken by lower row index first.
pub fn select_least_confident(probs: &Tensor, fraction: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        bail!(Config, "fraction must be in [0, 1], got {}", fraction);
    }
    let mut rows = checked_row_max(probs)?;
    let take = libm::round(fraction * rows.len() as f64) as usize;
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = rows.into_iter().take(take).map(|(r, _)| r).collect();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::seeded_rng;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn occ3d_centers() {
        let set = grid_centers(&GridSpec::occ3d());
        assert_eq!(set.len(), 640_000);
        let first = set.points[0];
        let last = *set.points.last().unwrap();
        for a in 0..3 {
            assert!((first[a] - [-39.8, -39.8, -0.8][a]).abs() < 1e-9);
            assert!((last[a] - [39.8, 39.8, 5.2][a]).abs() < 1e-9);
        }
        let unit = GridSpec::new(SceneBounds::new([0.0; 3], [1.0; 3]).unwrap(), [1, 1, 1]).unwrap();
        assert_eq!(grid_centers(&unit).points, vec![[0.5, 0.5, 0.5]]);
    }

    #[test]
    fn centers_round_trip_through_voxel_index() {
        let g = GridSpec::with_voxel_size(SceneBounds::new([-2.0, -1.0, 0.0], [2.0, 1.0, 1.2]).unwrap(), 0.4).unwrap();
        let set = grid_centers(&g);
        for (p, &i) in set.points.iter().zip(set.origin_index.as_ref().unwrap()) {
            assert_eq!(g.voxel_at(*p), Some(i));
            assert_eq!(g.center(i), *p);
        }
    }

    #[test]
    fn perturb_replays_seeded_draws() {
        let set = PoiSet::manual(vec![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0], [-1.0, -2.0, -3.0]]);
        let out = perturb(&set, 0.1, &mut seeded_rng(42)).unwrap();
        let mut rng = seeded_rng(42);
        for (p, q) in set.points.iter().zip(&out.points) {
            for a in 0..3 {
                let d: f64 = rng.gen_range(-0.1..=0.1);
                assert_eq!(q[a], p[a] + d);
            }
        }
        assert_eq!(perturb(&set, 0.0, &mut seeded_rng(1)).unwrap(), set);
        assert!(matches!(perturb(&set, -0.1, &mut seeded_rng(1)), Err(Error::Config(_))));
    }

    #[test]
    fn perturbation_stays_in_voxel() {
        let g = GridSpec::occ3d();
        let mut rng = seeded_rng(5);
        let voxels: Vec<usize> = (0..500).map(|_| rng.gen_range(0..g.len())).collect();
        let set = PoiSet::from_voxels(&g, voxels);
        let out = perturb(&set, 0.1, &mut rng).unwrap();
        for (p, &i) in out.points.iter().zip(out.origin_index.as_ref().unwrap()) {
            assert_eq!(g.voxel_at(*p), Some(i));
        }
        assert_eq!(out.kind, PoiKind::Standard);
    }

    #[test]
    fn training_sampling_cases() {
        let g = GridSpec::new(SceneBounds::new([0.0; 3], [4.0; 3]).unwrap(), [4; 3]).unwrap();
        let mut visible = vec![false; g.len()];
        for i in [3, 9, 27, 40] {
            visible[i] = true;
        }
        let mut out = sample_training_pois(&visible, &g, 4, &mut seeded_rng(0)).unwrap().origin_index.unwrap();
        out.sort_unstable();
        assert_eq!(out, vec![3, 9, 27, 40]);

        let mut single = vec![false; g.len()];
        single[10] = true;
        let s = sample_training_pois(&single, &g, 3, &mut seeded_rng(0)).unwrap();
        assert_eq!(s.points, vec![g.center(10); 3]);

        assert!(matches!(
            sample_training_pois(&vec![false; g.len()], &g, 3, &mut seeded_rng(0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn training_sampling_replays() {
        let g = GridSpec::new(SceneBounds::new([0.0; 3], [8.0; 3]).unwrap(), [8; 3]).unwrap();
        let mut rng = seeded_rng(9);
        let visible: Vec<bool> = (0..g.len()).map(|_| rng.gen_bool(0.3)).collect();
        let got = sample_training_pois(&visible, &g, 50, &mut seeded_rng(77)).unwrap();
        let pool: Vec<usize> = (0..g.len()).filter(|&i| visible[i]).collect();
        let expect: Vec<usize> = rand::seq::index::sample(&mut seeded_rng(77), pool.len(), 50)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        assert_eq!(got.origin_index.unwrap(), expect);
        let mut unique = expect.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 50);
    }

    #[test]
    fn manual_range_counts() {
        let outer = SceneBounds::occ3d();
        let inner = SceneBounds::new([-30.0, -30.0, -1.0], [30.0, 30.0, 5.4]).unwrap();
        let ring = manual_range(&inner, &outer, 0.4).unwrap();
        assert_eq!(ring.len(), 200 * 200 * 16 - 150 * 150 * 16);
        assert_eq!(ring.kind, PoiKind::Manual);
        for p in ring.points.iter().step_by(97) {
            assert!(outer.contains(*p) && !inner.contains(*p));
        }

        let outer = SceneBounds::new([0.0; 3], [4.0, 4.0, 1.0]).unwrap();
        let inner = SceneBounds::new([1.0, 1.0, 0.0], [3.0, 3.0, 1.0]).unwrap();
        let ring = manual_range(&inner, &outer, 1.0).unwrap();
        assert_eq!(ring.len(), 12);
        assert!(matches!(manual_range(&outer, &inner, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn uncertainty_selection() {
        let t = Tensor::new(&[2, 2], vec![0.95, 0.05, 0.5, 0.5]).unwrap();
        assert_eq!(select_uncertain(&t, 0.9).unwrap(), vec![1]);
        assert_eq!(select_uncertain(&t, 1.01).unwrap(), vec![0, 1]);
        assert!(select_uncertain(&t, 0.0).unwrap().is_empty());
        let bad = Tensor::new(&[1, 2], vec![0.7, 0.7]).unwrap();
        assert!(matches!(select_uncertain(&bad, 0.9), Err(Error::Contract(_))));

        let mut rng = seeded_rng(4);
        let mut data = Vec::new();
        for _ in 0..100 {
            let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0f64).powi(4)).collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|v| v / s));
        }
        let probs = Tensor::new(&[100, 5], data).unwrap();
        let mut expect = Vec::new();
        for r in 0..100 {
            let mut m = 0.0;
            for c in 0..5 {
                if probs.row(r)[c] > m {
                    m = probs.row(r)[c];
                }
            }
            if m < 0.9 {
                expect.push(r);
            }
        }
        assert_eq!(select_uncertain(&probs, 0.9).unwrap(), expect);
    }

    #[test]
    fn least_confident_fraction() {
        let t = Tensor::new(&[4, 2], vec![0.9, 0.1, 0.6, 0.4, 0.6, 0.4, 0.99, 0.01]).unwrap();
        assert_eq!(select_least_confident(&t, 0.25).unwrap(), vec![1]);
        assert_eq!(select_least_confident(&t, 0.5).unwrap(), vec![1, 2]);
        assert_eq!(select_least_confident(&t, 0.75).unwrap(), vec![0, 1, 2]);
        assert!(select_least_confident(&t, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn perturb_bounded(seed in 0u64..500, radius in 0.0f64..2.0) {
            let set = PoiSet::manual(vec![[1.0, -2.0, 0.5]; 8]);
            let out = perturb(&set, radius, &mut seeded_rng(seed)).unwrap();
            for (p, q) in set.points.iter().zip(&out.points) {
                for a in 0..3 {
                    prop_assert!((p[a] - q[a]).abs() <= radius);
                }
            }
        }
    }
}
