//! Decoder building blocks: linear/MLP/norm parameter groups, point
//! cross-attention, group point cross-attention and the feed-forward block.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::attention::{deform_sample, project_rows, AttnShape, HitPairs};
use crate::diffcore::{fan_in_uniform, Bound, Graph, ParamId, ParamSink, Tensor, Var};
use crate::error::Result;
use crate::geometry::CameraRig;
use crate::math::Vec3;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut dyn ParamSink, name: &str, w: Tensor, b: Tensor) -> Result<Self> {
        Ok(Self {
            w: store.param(&format!("{name}.weight"), w)?,
            b: store.param(&format!("{name}.bias"), b)?,
        })
    }

    /// Fan-in uniform weights and zero bias.
    pub fn init<R: Rng + ?Sized>(store: &mut dyn ParamSink, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Result<Self> {
        let w = fan_in_uniform(&[fan_in, fan_out], fan_in, gain, rng);
        Self::new(store, name, w, Tensor::zeros(&[fan_out]))
    }

    #[inline]
    pub fn apply(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.linear(x, b.var(self.w), Some(b.var(self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn init(store: &mut dyn ParamSink, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.param(&format!("{name}.weight"), Tensor::full(&[d], 1.0))?,
            bias: store.param(&format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    #[inline]
    pub fn apply(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gain), b.var(self.bias))
    }
}

/// Linear, ReLU, Linear.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(store: &mut dyn ParamSink, name: &str, dims: [usize; 3], rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1: Linear::init(store, &format!("{name}.fc1"), dims[0], dims[1], core::f64::consts::SQRT_2, rng)?,
            fc2: Linear::init(store, &format!("{name}.fc2"), dims[1], dims[2], 1.0, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, b, x)?;
        let h = g.relu(h);
        self.fc2.apply(g, b, h)
    }
}

/// Parameters of one deformable attention block.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub shape: AttnShape,
    pub offset: Linear,
    pub weight: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(store: &mut dyn ParamSink, name: &str, shape: AttnShape, rng: &mut R) -> Result<Self> {
        let d = shape.d;
        let taps = shape.taps();
        // small weights; bias spreads each head's taps along its own direction
        let ow = fan_in_uniform(&[d, taps * 2], d, 0.01, rng);
        let mut ob = Tensor::zeros(&[taps * 2]);
        for h in 0..shape.heads {
            let a = 2.0 * core::f64::consts::PI * h as f64 / shape.heads as f64;
            let (du, dv) = (crate::math::cos(a), crate::math::sin(a));
            for l in 0..shape.levels {
                for s in 0..shape.samples {
                    let t = shape.tap(h, l, s);
                    let r = 0.25 * (s + 1) as f64;
                    ob.data_mut()[2 * t] = du * r;
                    ob.data_mut()[2 * t + 1] = dv * r;
                }
            }
        }
        Ok(Self {
            shape,
            offset: Linear::new(store, &format!("{name}.offset"), ow, ob)?,
            weight: Linear::new(store, &format!("{name}.attn"), fan_in_uniform(&[d, taps], d, 0.1, rng), Tensor::zeros(&[taps]))?,
            value: Linear::init(store, &format!("{name}.value"), d, d, 1.0, rng)?,
            output: Linear::init(store, &format!("{name}.out"), d, d, 1.0, rng)?,
        })
    }

    /// Value projection of every `[h, w, d]` map, `maps[view][level]`.
    pub fn project_values(&self, g: &mut Graph, b: &Bound, maps: &[Vec<Var>]) -> Result<Vec<Vec<Var>>> {
        maps.iter()
            .map(|levels| {
                levels
                    .iter()
                    .map(|&m| {
                        let dims = g.dims(m).to_vec();
                        let flat = g.reshape(m, &[dims[0] * dims[1], dims[2]])?;
                        let v = self.value.apply(g, b, flat)?;
                        g.reshape(v, &dims)
                    })
                    .collect()
            })
            .collect()
    }

    /// Per-query offsets `[N, taps * 2]` and attention weights `[N, taps]`,
    /// the weights softmax-normalized over the taps of each head.
    pub fn taps(&self, g: &mut Graph, b: &Bound, q: Var) -> Result<(Var, Var)> {
        let n = g.dims(q)[0];
        let s = self.shape;
        let off = self.offset.apply(g, b, q)?;
        let logits = self.weight.apply(g, b, q)?;
        let per_head = g.reshape(logits, &[n * s.heads, s.levels * s.samples])?;
        let w = g.softmax(per_head)?;
        let w = g.reshape(w, &[n, s.taps()])?;
        Ok((off, w))
    }

    /// Attention of query rows `rows[p]` at `(view[p], uv[p])` before the
    /// output projection, `[P, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample(
        &self,
        g: &mut Graph,
        values: &[Vec<Var>],
        off: Var,
        w: Var,
        rows: Vec<usize>,
        view: Vec<usize>,
        uv: Var,
    ) -> Result<Var> {
        let off_p = g.gather_rows(off, rows.clone())?;
        let w_p = g.gather_rows(w, rows)?;
        deform_sample(g, self.shape, values, view, uv, off_p, w_p)
    }
}

/// Point cross-attention: attention at every hit view of each point,
/// averaged over views, projected, residual-added and normalized. Points no
/// camera sees keep their content.
#[allow(clippy::too_many_arguments)]
pub fn point_cross_attention(
    g: &mut Graph,
    b: &Bound,
    attn: &Attention,
    norm: &Norm,
    values: &[Vec<Var>],
    content: Var,
    pos: Var,
    hits: &HitPairs,
) -> Result<Var> {
    let n = g.dims(content)[0];
    if hits.is_empty() {
        return Ok(content);
    }
    let q = g.add(content, pos)?;
    let (off, w) = attn.taps(g, b, q)?;
    let uv = g.constant(hits.uv_tensor());
    let s = attn.sample(g, values, off, w, hits.point.clone(), hits.view.clone(), uv)?;
    let mean = g.segment_reduce(s, hits.point.clone(), n, true)?;
    let out = attn.output.apply(g, b, mean)?;
    let res = g.add(out, content)?;
    let normed = norm.apply(g, b, res)?;
    g.select_rows(hits.hit_mask(n), normed, content)
}

/// Group point parameters: ego-frame offsets of `groups` members per query.
#[derive(Clone, Copy, Debug)]
pub struct GroupCoords {
    pub groups: usize,
    pub linear: Linear,
}

impl GroupCoords {
    pub fn init<R: Rng + ?Sized>(store: &mut dyn ParamSink, name: &str, d: usize, groups: usize, rng: &mut R) -> Result<Self> {
        let w = fan_in_uniform(&[d, 3 * groups], d, 0.05, rng);
        Ok(Self {
            groups,
            linear: Linear::new(store, name, w, Tensor::zeros(&[3 * groups]))?,
        })
    }
}

/// Group point cross-attention. Offsets predicted from the query content
/// place `G` members around each point; every member is attended in its own
/// hit views with the parent's taps. Results are averaged over each member's
/// views, then over the members with a hit (summed when `member_mean` is
/// false), projected, residual-added and normalized.
#[allow(clippy::too_many_arguments)]
pub fn group_point_cross_attention(
    g: &mut Graph,
    b: &Bound,
    attn: &Attention,
    group: &GroupCoords,
    norm: &Norm,
    values: &[Vec<Var>],
    content: Var,
    pos: Var,
    points: &[Vec3],
    rig: &CameraRig,
    member_mean: bool,
) -> Result<Var> {
    let n = points.len();
    let gs = group.groups;
    let offsets = group.linear.apply(g, b, content)?;
    let offsets = g.reshape(offsets, &[n * gs, 3])?;
    let base = g.constant(Tensor::from_fn(&[n * gs, 3], |i| points[i / (3 * gs)][i % 3]));
    let members = g.add(base, offsets)?;

    let mut rows = Vec::new();
    let mut cams = Vec::new();
    let mut views = Vec::new();
    let mut compact = Vec::new();
    let mut parent = Vec::new();
    {
        let mv = g.value(members);
        for m in 0..n * gs {
            let r = mv.row(m);
            let p = [r[0], r[1], r[2]];
            let before = rows.len();
            for (v, cam) in rig.cameras.iter().enumerate() {
                if cam.project(p).hit {
                    rows.push(m);
                    cams.push(cam);
                    views.push(v);
                    compact.push(parent.len());
                }
            }
            if rows.len() > before {
                parent.push(m / gs);
            }
        }
    }
    if rows.is_empty() {
        return Ok(content);
    }
    let uv = project_rows(g, members, rows.clone(), &cams)?;
    let q = g.add(content, pos)?;
    let (off, w) = attn.taps(g, b, q)?;
    let parents: Vec<usize> = rows.iter().map(|&m| m / gs).collect();
    let s = attn.sample(g, values, off, w, parents, views, uv)?;
    let per_member = g.segment_reduce(s, compact, parent.len(), true)?;
    let mut hit = vec![false; n];
    for &p in &parent {
        hit[p] = true;
    }
    let per_point = g.segment_reduce(per_member, parent, n, member_mean)?;
    let out = attn.output.apply(g, b, per_point)?;
    let res = g.add(out, content)?;
    let normed = norm.apply(g, b, res)?;
    g.select_rows(hit, normed, content)
}

/// Feed-forward block with residual and normalization.
pub fn feed_forward(g: &mut Graph, b: &Bound, mlp: &Mlp, norm: &Norm, x: Var) -> Result<Var> {
    let y = mlp.apply(g, b, x)?;
    let res = g.add(y, x)?;
    norm.apply(g, b, res)
}
