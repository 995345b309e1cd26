//! Multi-head, multi-level deformable sampling and the differentiable
//! pinhole projection used by group points.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::{bilinear_backward, bilinear_sample_into, CustomOp, Graph, Tensor, Var};
use crate::error::{bail, Result};
use crate::geometry::Camera;
use crate::math::Vec3;

/// Shape of one deformable attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub d: usize,
    pub heads: usize,
    pub levels: usize,
    pub samples: usize,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Sampling locations per query: heads x levels x samples.
    pub fn taps(&self) -> usize {
        self.heads * self.levels * self.samples
    }

    #[inline]
    pub fn tap(&self, head: usize, level: usize, sample: usize) -> usize {
        (head * self.levels + level) * self.samples + sample
    }
}

/// Input resolution per level-0 feature pixel.
pub const STEM_STRIDE: f64 = 4.0;

/// Continuous feature coordinate on `level` of an image pixel coordinate.
///
/// Image pixel `i` covers `[i, i + 1)`; feature pixel `j` of level 0 is
/// centered on image pixel `4 j`, and each pooled level halves the lattice.
#[inline]
pub fn level_coord(image: f64, level: usize) -> f64 {
    let s = STEM_STRIDE * (1u64 << level) as f64;
    (image + 0.5 * STEM_STRIDE - 0.5) / s - 0.5
}

#[inline]
fn level_scale(level: usize) -> f64 {
    1.0 / (STEM_STRIDE * (1u64 << level) as f64)
}

struct DeformSampleOp {
    shape: AttnShape,
    view: Vec<usize>,
    /// `(h, w)` of map `view * levels + level`.
    extents: Vec<(usize, usize)>,
}

impl DeformSampleOp {
    /// Visits every tap of pair `p` with its level, map slot and sampling location.
    #[inline]
    fn for_taps(&self, p: usize, uv: &[f64], offsets: &[f64], mut f: impl FnMut(usize, usize, usize, f64, f64)) {
        let s = &self.shape;
        for h in 0..s.heads {
            for l in 0..s.levels {
                let slot = self.view[p] * s.levels + l;
                let (cu, cv) = (level_coord(uv[0], l), level_coord(uv[1], l));
                for k in 0..s.samples {
                    let t = s.tap(h, l, k);
                    f(h, t, slot, cv + offsets[2 * t + 1], cu + offsets[2 * t]);
                }
            }
        }
    }
}

impl CustomOp for DeformSampleOp {
    fn name(&self) -> &'static str {
        "deform_sample"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let s = self.shape;
        let (d, dh, taps) = (s.d, s.head_dim(), s.taps());
        let (uv, off, wts) = (inputs[0], inputs[1], inputs[2]);
        let maps = &inputs[3..];
        let mut duv = vec![0.0; uv.len()];
        let mut doff = vec![0.0; off.len()];
        let mut dw = vec![0.0; wts.len()];
        let mut dmaps: Vec<Vec<f64>> = maps.iter().map(|m| vec![0.0; m.len()]).collect();
        for p in 0..self.view.len() {
            let g = &grad.data()[p * d..(p + 1) * d];
            let puv = &uv.data()[p * 2..p * 2 + 2];
            let poff = &off.data()[p * taps * 2..(p + 1) * taps * 2];
            let pw = &wts.data()[p * taps..(p + 1) * taps];
            let mut acc_uv = [0.0; 2];
            let mut d_off = vec![0.0; taps * 2];
            let mut d_w = vec![0.0; taps];
            self.for_taps(p, puv, poff, |h, t, slot, y, x| {
                let (mh, mw) = self.extents[slot];
                let (dy, dx, inner) =
                    bilinear_backward(maps[slot].data(), mh, mw, d, h * dh, dh, y, x, &g[h * dh..], pw[t], &mut dmaps[slot]);
                d_off[2 * t] += dx;
                d_off[2 * t + 1] += dy;
                d_w[t] += inner;
                let l = (t / s.samples) % s.levels;
                acc_uv[0] += dx * level_scale(l);
                acc_uv[1] += dy * level_scale(l);
            });
            duv[p * 2] += acc_uv[0];
            duv[p * 2 + 1] += acc_uv[1];
            doff[p * taps * 2..(p + 1) * taps * 2].copy_from_slice(&d_off);
            dw[p * taps..(p + 1) * taps].copy_from_slice(&d_w);
        }
        let mut out = vec![
            Some(Tensor::new(uv.dims(), duv).expect("dims")),
            Some(Tensor::new(off.dims(), doff).expect("dims")),
            Some(Tensor::new(wts.dims(), dw).expect("dims")),
        ];
        for (m, dm) in maps.iter().zip(dmaps) {
            out.push(Some(Tensor::new(m.dims(), dm).expect("dims")));
        }
        out
    }
}

/// Deformable sampling for a list of (query, view) pairs.
///
/// * `maps[view][level]`: `[h_l, w_l, d]` value maps.
/// * `view[p]`: camera of pair `p`.
/// * `uv`: `[P, 2]` image pixel coordinates `(u, v)` of the reference points.
/// * `offsets`: `[P, taps * 2]` offsets `(du, dv)` in pixels of the tap's level.
/// * `weights`: `[P, taps]` attention weights.
///
/// Output `[P, d]`: head `h` fills channels `h * d / heads ..`, each the
/// weighted sum of its taps.
pub fn deform_sample(
    g: &mut Graph,
    shape: AttnShape,
    maps: &[Vec<Var>],
    view: Vec<usize>,
    uv: Var,
    offsets: Var,
    weights: Var,
) -> Result<Var> {
    let p = view.len();
    let taps = shape.taps();
    if g.dims(uv) != [p, 2] || g.dims(offsets) != [p, taps * 2] || g.dims(weights) != [p, taps] {
        return Err(crate::Error::Shape {
            op: "deform_sample",
            left: g.dims(offsets).to_vec(),
            right: alloc::vec![p, taps * 2],
        });
    }
    let mut inputs = vec![uv, offsets, weights];
    let mut extents = Vec::new();
    for view_maps in maps {
        if view_maps.len() != shape.levels {
            bail!(Contract, "expected {} levels, got {}", shape.levels, view_maps.len());
        }
        for &m in view_maps {
            let dims = g.dims(m);
            if dims.len() != 3 || dims[2] != shape.d {
                bail!(Contract, "value map dims {:?} do not carry {} channels", dims, shape.d);
            }
            extents.push((dims[0], dims[1]));
            inputs.push(m);
        }
    }
    if let Some(&bad) = view.iter().find(|&&v| v >= maps.len()) {
        bail!(Contract, "pair view {} out of range for {} views", bad, maps.len());
    }
    let op = DeformSampleOp { shape, view, extents };
    let (d, dh) = (shape.d, shape.head_dim());
    let mut out = vec![0.0; p * d];
    {
        let (uvv, offv, wv) = (g.value(uv).data(), g.value(offsets).data(), g.value(weights).data());
        let map_vals: Vec<&Tensor> = inputs[3..].iter().map(|&m| g.value(m)).collect();
        for i in 0..p {
            let o = &mut out[i * d..(i + 1) * d];
            let pw = &wv[i * taps..(i + 1) * taps];
            op.for_taps(i, &uvv[i * 2..i * 2 + 2], &offv[i * taps * 2..(i + 1) * taps * 2], |h, t, slot, y, x| {
                let (mh, mw) = op.extents[slot];
                bilinear_sample_into(map_vals[slot].data(), mh, mw, d, h * dh, dh, y, x, pw[t], &mut o[h * dh..]);
            });
        }
    }
    let value = Tensor::new(&[p, d], out)?;
    Ok(g.custom(&inputs, value, op))
}

struct ProjectOp {
    rows: Vec<usize>,
    matrices: Vec<[[f64; 4]; 3]>,
}

impl CustomOp for ProjectOp {
    fn name(&self) -> &'static str {
        "project"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let pts = inputs[0];
        let mut dp = vec![0.0; pts.len()];
        for (q, (&r, m)) in self.rows.iter().zip(&self.matrices).enumerate() {
            let p = &pts.data()[r * 3..r * 3 + 3];
            let z = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3];
            let (u, v) = (output.data()[q * 2], output.data()[q * 2 + 1]);
            let (gu, gv) = (grad.data()[q * 2], grad.data()[q * 2 + 1]);
            for j in 0..3 {
                dp[r * 3 + j] += (gu * (m[0][j] - u * m[2][j]) + gv * (m[1][j] - v * m[2][j])) / z;
            }
        }
        vec![Some(Tensor::new(pts.dims(), dp).expect("dims"))]
    }
}

/// Pixel coordinates of `points[rows[q]]` in camera `cams[q]`, `[Q, 2]`.
pub fn project_rows(g: &mut Graph, points: Var, rows: Vec<usize>, cams: &[&Camera]) -> Result<Var> {
    let pv = g.value(points);
    if pv.rank() != 2 || pv.cols() != 3 {
        bail!(Contract, "points must be [N, 3], got {:?}", pv.dims());
    }
    if rows.len() != cams.len() {
        bail!(Contract, "{} rows for {} cameras", rows.len(), cams.len());
    }
    let mut uv = Vec::with_capacity(rows.len() * 2);
    for (&r, cam) in rows.iter().zip(cams) {
        let row = pv.row(r);
        let pr = cam.project([row[0], row[1], row[2]]);
        uv.extend_from_slice(&pr.uv);
    }
    let value = Tensor::new(&[rows.len(), 2], uv)?;
    let matrices = cams.iter().map(|c| c.projection_matrix()).collect();
    Ok(g.custom(&[points], value, ProjectOp { rows, matrices }))
}

/// `(point, view, uv)` for every camera that sees each point, in point then
/// view order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HitPairs {
    pub point: Vec<usize>,
    pub view: Vec<usize>,
    pub uv: Vec<[f64; 2]>,
}

impl HitPairs {
    pub fn compute(points: &[Vec3], cams: &[Camera]) -> Self {
        let mut out = Self::default();
        for (i, &p) in points.iter().enumerate() {
            for (v, cam) in cams.iter().enumerate() {
                let pr = cam.project(p);
                if pr.hit {
                    out.point.push(i);
                    out.view.push(v);
                    out.uv.push(pr.uv);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.point.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point.is_empty()
    }

    /// Per point: at least one view sees it.
    pub fn hit_mask(&self, points: usize) -> Vec<bool> {
        let mut m = vec![false; points];
        for &p in &self.point {
            m[p] = true;
        }
        m
    }

    pub fn uv_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.len(), 2], |i| self.uv[i / 2][i % 2])
    }
}
