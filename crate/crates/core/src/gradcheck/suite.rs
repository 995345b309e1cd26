//! The full finite-difference sweep over every differentiable operation.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;

use super::{check, random_tensor, readout, FdConfig};
use crate::decoder::{
    deform_sample, feed_forward, group_point_cross_attention, point_cross_attention, project_rows, Attention, AttnShape, Decoder,
    DecoderConfig, GroupCoords, HitPairs, Mlp, Norm,
};
use crate::diffcore::{Bound, CustomOp, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::geometry::{Camera, CameraRig, SceneBounds};
use crate::losses::{dice_loss, weighted_ce, CeNorm, ClassWeights, DiceMode};
use crate::math::Vec3;
use crate::seeded_rng;
use crate::synthworld::{conv_stem, FeaturePyramid, Stem, StemConfig};

/// Tolerance on the worst relative error of any operation.
pub const TOLERANCE: f64 = 1e-4;

type Loss = Box<dyn Fn(&mut Graph, &Bound) -> Result<Var>>;
type Builder = fn(&mut crate::SeededRng) -> Result<(ParamStore, Loss)>;

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub base_seed: u64,
    /// Adds an operation with a deliberately wrong backward rule.
    pub include_corrupted: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            base_seed: 0,
            include_corrupted: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_error: f64,
    /// Seed, input name and flat index of the worst element.
    pub worst: Option<(u64, String, usize)>,
    pub checked: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub seeds: u64,
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failures(&self) -> Vec<&OpReport> {
        self.ops.iter().filter(|o| !o.passed()).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradient check over {} seeds, tolerance {:e}", self.seeds, TOLERANCE)?;
        for o in &self.ops {
            let worst = match &o.worst {
                Some((s, name, i)) => format!("seed {s} {name}[{i}]"),
                None => String::from("-"),
            };
            writeln!(
                f,
                "{:<22} {:>6} checked  max rel {:.3e}  worst {:<28} {}",
                o.op,
                o.checked,
                o.max_rel_error,
                worst,
                if o.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.passed() { "all operations pass" } else { "gradient check FAILED" })
    }
}

fn leaf(store: &mut ParamStore, name: &str, dims: &[usize], scale: f64, rng: &mut crate::SeededRng) -> Result<ParamId> {
    store.add(name, random_tensor(dims, scale, rng))
}

fn unary(rng: &mut crate::SeededRng, f: fn(&mut Graph, Var) -> Result<Var>) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "x", &[3, 4], 1.5, rng)?;
    let r = random_tensor(&[3, 4], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = f(g, b.var(x))?;
            readout(g, y, &r)
        }),
    ))
}

fn binary(rng: &mut crate::SeededRng, b_dims: &[usize], out: &[usize], f: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "a", &[3, 4], 1.0, rng)?;
    let y = leaf(&mut s, "b", b_dims, 1.0, rng)?;
    let r = random_tensor(out, 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let o = f(g, b.var(x), b.var(y))?;
            readout(g, o, &r)
        }),
    ))
}

fn case_linear(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "x", &[3, 4], 1.0, rng)?;
    let w = leaf(&mut s, "w", &[4, 5], 1.0, rng)?;
    let bias = leaf(&mut s, "b", &[5], 1.0, rng)?;
    let r = random_tensor(&[3, 5], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = g.linear(b.var(x), b.var(w), Some(b.var(bias)))?;
            readout(g, y, &r)
        }),
    ))
}

fn case_matmul(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    binary(rng, &[4, 2], &[3, 2], |g, a, b| g.matmul(a, b))
}

fn case_elementwise(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    binary(rng, &[3, 4], &[3, 4], |g, a, b| {
        let m = g.mul(a, b)?;
        let d = g.sub(a, b)?;
        let d = g.scale(d, -1.7);
        g.add(m, d)
    })
}

fn case_add_row(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    binary(rng, &[4], &[3, 4], |g, a, b| g.add_row(a, b))
}

fn case_relu(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    unary(rng, |g, x| Ok(g.relu(x)))
}

fn case_sigmoid(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    unary(rng, |g, x| Ok(g.sigmoid(x)))
}

fn case_sin(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    unary(rng, |g, x| Ok(g.sin(x)))
}

fn case_cos(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    unary(rng, |g, x| Ok(g.cos(x)))
}

fn case_softmax(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    unary(rng, |g, x| g.softmax(x))
}

fn case_log_softmax(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    unary(rng, |g, x| g.log_softmax(x))
}

fn case_reductions(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "x", &[2, 3], 1.0, rng)?;
    let y = leaf(&mut s, "y", &[4], 1.0, rng)?;
    let c = rng.gen_range(-2.0..2.0);
    Ok((
        s,
        Box::new(move |g, b| {
            let sx = g.sum(b.var(x));
            let sx = g.mul(sx, sx)?;
            let my = g.mean(b.var(y));
            let my = g.scale(my, c);
            g.add(sx, my)
        }),
    ))
}

fn case_concat_reshape(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let a = leaf(&mut s, "a", &[2, 3], 1.0, rng)?;
    let c = leaf(&mut s, "c", &[2, 2], 1.0, rng)?;
    let d = leaf(&mut s, "d", &[1, 5], 1.0, rng)?;
    let r = random_tensor(&[5, 3], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let wide = g.concat(&[b.var(a), b.var(c)], 1)?;
            let tall = g.concat(&[wide, b.var(d)], 0)?;
            let y = g.reshape(tall, &[5, 3])?;
            readout(g, y, &r)
        }),
    ))
}

fn case_gather_segment(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "x", &[4, 3], 1.0, rng)?;
    let index: Vec<usize> = (0..7).map(|_| rng.gen_range(0..4)).collect();
    let segment: Vec<usize> = (0..7).map(|_| rng.gen_range(0..5)).collect();
    let mean = rng.gen_bool(0.5);
    let r = random_tensor(&[5, 3], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = g.gather_rows(b.var(x), index.clone())?;
            let y = g.segment_reduce(y, segment.clone(), 5, mean)?;
            readout(g, y, &r)
        }),
    ))
}

fn case_select_rows(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "a", &[5, 3], 1.0, rng)?;
    let y = leaf(&mut s, "b", &[5, 3], 1.0, rng)?;
    let mask: Vec<bool> = (0..5).map(|_| rng.gen_bool(0.5)).collect();
    let r = random_tensor(&[5, 3], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let o = g.select_rows(mask.clone(), b.var(x), b.var(y))?;
            readout(g, o, &r)
        }),
    ))
}

fn case_layer_norm(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "x", &[3, 5], 1.0, rng)?;
    let gain = leaf(&mut s, "gain", &[5], 1.0, rng)?;
    let bias = leaf(&mut s, "bias", &[5], 1.0, rng)?;
    let r = random_tensor(&[3, 5], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = g.layer_norm(b.var(x), b.var(gain), b.var(bias))?;
            readout(g, y, &r)
        }),
    ))
}

fn case_conv2d(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let stride = rng.gen_range(1..=2);
    let x = leaf(&mut s, "x", &[5, 6, 2], 1.0, rng)?;
    let w = leaf(&mut s, "w", &[3, 3, 2, 3], 1.0, rng)?;
    let bias = leaf(&mut s, "b", &[3], 1.0, rng)?;
    let out = if stride == 1 { [5, 6, 3] } else { [3, 3, 3] };
    let r = random_tensor(&out, 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = g.conv2d(b.var(x), b.var(w), b.var(bias), stride, 1)?;
            readout(g, y, &r)
        }),
    ))
}

fn case_avg_pool2(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "x", &[5, 4, 2], 1.0, rng)?;
    let r = random_tensor(&[3, 2, 2], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = g.avg_pool2(b.var(x))?;
            readout(g, y, &r)
        }),
    ))
}

fn case_bilinear(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let map = leaf(&mut s, "map", &[4, 5, 3], 1.0, rng)?;
    // the border band exercises zero padding
    let c = Tensor::new(&[2], vec![rng.gen_range(-0.8..3.8), rng.gen_range(-0.8..4.8)])?;
    let coord = s.add("coord", c)?;
    let r = random_tensor(&[3], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = g.bilinear_sample(b.var(map), b.var(coord))?;
            readout(g, y, &r)
        }),
    ))
}

fn small_rig() -> Result<CameraRig> {
    let a = Camera::looking([0.0, 0.0, 0.0], 0.0, 0.0, 1.6, 16, 12)?;
    let b = Camera::looking([0.0, 0.0, 0.0], 1.2, 0.0, 1.6, 16, 12)?;
    CameraRig::new(vec![a, b])
}

fn small_cfg(member_mean: bool) -> DecoderConfig {
    DecoderConfig {
        d: 12,
        heads: 2,
        levels: 2,
        samples: 2,
        groups: 2,
        layers: 1,
        ffn_hidden: 8,
        head_hidden: 7,
        classes: 4,
        member_mean,
    }
}

fn points_in_view(rng: &mut crate::SeededRng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| [rng.gen_range(2.0..6.0), rng.gen_range(-2.0..4.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

/// Parameters moved off their structured init so biases, norms and
/// offsets all carry gradient.
fn jitter(store: &mut ParamStore, rng: &mut crate::SeededRng, scale: f64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// Adds `[view][level]` feature maps with a `3 x 4` first level.
fn add_maps(store: &mut ParamStore, views: usize, levels: usize, d: usize, rng: &mut crate::SeededRng) -> Result<Vec<Vec<ParamId>>> {
    (0..views)
        .map(|v| {
            (0..levels)
                .map(|l| {
                    let dims = [3usize.div_ceil(1 << l), 4usize.div_ceil(1 << l), d];
                    leaf(store, &format!("map{v}.{l}"), &dims, 1.0, rng)
                })
                .collect()
        })
        .collect()
}

fn bind_maps(b: &Bound, ids: &[Vec<ParamId>]) -> Vec<Vec<Var>> {
    ids.iter().map(|v| v.iter().map(|&id| b.var(id)).collect()).collect()
}

fn case_position_encode(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let dec = Decoder::init(&mut s, small_cfg(true), rng)?;
    jitter(&mut s, rng, 0.3);
    let bounds = SceneBounds::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0])?;
    let points = points_in_view(rng, 3);
    let r = random_tensor(&[3, 12], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = dec.position_encode(g, b, &points, &bounds)?;
            readout(g, y, &r)
        }),
    ))
}

fn case_project_rows(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let rig = small_rig()?;
    let mut s = ParamStore::new();
    let pts = points_in_view(rng, 3);
    let flat: Vec<f64> = pts.iter().flatten().copied().collect();
    let p = s.add("points", Tensor::new(&[3, 3], flat)?)?;
    let rows = vec![0, 1, 1, 2];
    let views: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
    let r = random_tensor(&[4, 2], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let cams: Vec<&Camera> = views.iter().map(|&v| &rig.cameras[v]).collect();
            let uv = project_rows(g, b.var(p), rows.clone(), &cams)?;
            readout(g, uv, &r)
        }),
    ))
}

fn case_deformable(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let shape = AttnShape {
        d: 4,
        heads: 2,
        levels: 2,
        samples: 2,
    };
    let mut s = ParamStore::new();
    let maps = add_maps(&mut s, 2, 2, 4, rng)?;
    let p = 3;
    let uv = Tensor::from_fn(&[p, 2], |i| if i % 2 == 0 { rng.gen_range(1.0..15.0) } else { rng.gen_range(1.0..11.0) });
    let uv = s.add("uv", uv)?;
    let off = leaf(&mut s, "offsets", &[p, shape.taps() * 2], 1.5, rng)?;
    let w = leaf(&mut s, "weights", &[p, shape.taps()], 1.0, rng)?;
    let view: Vec<usize> = (0..p).map(|_| rng.gen_range(0..2)).collect();
    let r = random_tensor(&[p, 4], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = deform_sample(g, shape, &bind_maps(b, &maps), view.clone(), b.var(uv), b.var(off), b.var(w))?;
            readout(g, y, &r)
        }),
    ))
}

struct AttnFixture {
    store: ParamStore,
    maps: Vec<Vec<ParamId>>,
    content: ParamId,
    pos: ParamId,
    points: Vec<Vec3>,
    rig: CameraRig,
    readout: Tensor,
}

fn attn_fixture(rng: &mut crate::SeededRng, store: ParamStore, n: usize) -> Result<AttnFixture> {
    let mut store = store;
    jitter(&mut store, rng, 0.3);
    let maps = add_maps(&mut store, 2, 2, 12, rng)?;
    let content = leaf(&mut store, "content", &[n, 12], 1.0, rng)?;
    let pos = leaf(&mut store, "pos", &[n, 12], 1.0, rng)?;
    let mut points = points_in_view(rng, n - 1);
    // one point outside both frusta passes its content through
    points.push([-5.0, 0.0, 0.0]);
    Ok(AttnFixture {
        store,
        maps,
        content,
        pos,
        points,
        rig: small_rig()?,
        readout: random_tensor(&[n, 12], 1.0, rng),
    })
}

fn case_pca(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let shape = small_cfg(true).attn_shape();
    let mut s = ParamStore::new();
    let attn = Attention::init(&mut s, "pca", shape, rng)?;
    let norm = Norm::init(&mut s, "pca.norm", 12)?;
    let fx = attn_fixture(rng, s, 4)?;
    let store = fx.store.clone();
    Ok((
        store,
        Box::new(move |g, b| {
            let vals = attn.project_values(g, b, &bind_maps(b, &fx.maps))?;
            let hits = HitPairs::compute(&fx.points, &fx.rig.cameras);
            let y = point_cross_attention(g, b, &attn, &norm, &vals, b.var(fx.content), b.var(fx.pos), &hits)?;
            readout(g, y, &fx.readout)
        }),
    ))
}

fn case_gpca(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let member_mean = rng.gen_bool(0.5);
    let shape = small_cfg(member_mean).attn_shape();
    let mut s = ParamStore::new();
    let attn = Attention::init(&mut s, "gpca", shape, rng)?;
    let group = GroupCoords::init(&mut s, "gpca.group", 12, 2, rng)?;
    let norm = Norm::init(&mut s, "gpca.norm", 12)?;
    let fx = attn_fixture(rng, s, 4)?;
    let store = fx.store.clone();
    Ok((
        store,
        Box::new(move |g, b| {
            let vals = attn.project_values(g, b, &bind_maps(b, &fx.maps))?;
            let y = group_point_cross_attention(
                g,
                b,
                &attn,
                &group,
                &norm,
                &vals,
                b.var(fx.content),
                b.var(fx.pos),
                &fx.points,
                &fx.rig,
                member_mean,
            )?;
            readout(g, y, &fx.readout)
        }),
    ))
}

fn case_feed_forward(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let mlp = Mlp::init(&mut s, "ffn", [6, 5, 6], rng)?;
    let norm = Norm::init(&mut s, "ffn.norm", 6)?;
    jitter(&mut s, rng, 0.3);
    let x = leaf(&mut s, "x", &[3, 6], 1.0, rng)?;
    let r = random_tensor(&[3, 6], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = feed_forward(g, b, &mlp, &norm, b.var(x))?;
            readout(g, y, &r)
        }),
    ))
}

fn case_occupancy_head(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let head = Mlp::init(&mut s, "head", [12, 7, 4], rng)?;
    jitter(&mut s, rng, 0.3);
    let x = leaf(&mut s, "content", &[3, 12], 1.0, rng)?;
    let r = random_tensor(&[3, 4], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let y = head.apply(g, b, b.var(x))?;
            readout(g, y, &r)
        }),
    ))
}

fn loss_inputs(rng: &mut crate::SeededRng) -> Result<(ParamStore, ParamId, Vec<usize>)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "logits", &[6, 4], 1.5, rng)?;
    let labels = (0..6).map(|_| rng.gen_range(0..4)).collect();
    Ok((s, x, labels))
}

fn case_weighted_ce(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let (s, x, labels) = loss_inputs(rng)?;
    let w = ClassWeights((0..4).map(|_| rng.gen_range(0.2..2.0)).collect());
    let norm = if rng.gen_bool(0.5) { CeNorm::WeightedMean } else { CeNorm::Sum };
    Ok((s, Box::new(move |g, b| weighted_ce(g, b.var(x), &labels, &w, norm))))
}

fn case_dice_loss(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let (s, x, labels) = loss_inputs(rng)?;
    let mode = if rng.gen_bool(0.5) { DiceMode::Macro } else { DiceMode::Binary };
    Ok((
        s,
        Box::new(move |g, b| {
            let p = g.softmax(b.var(x))?;
            dice_loss(g, p, &labels, mode)
        }),
    ))
}

fn case_conv_stem(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let cfg = StemConfig {
        in_channels: 3,
        hidden: 3,
        d: 4,
        levels: 2,
    };
    let stem = Stem::init(&mut s, "stem", cfg, rng)?;
    jitter(&mut s, rng, 0.1);
    let img = leaf(&mut s, "image", &[9, 11, 3], 1.0, rng)?;
    let r0 = random_tensor(&[3, 3, 4], 1.0, rng);
    let r1 = random_tensor(&[2, 2, 4], 1.0, rng);
    Ok((
        s,
        Box::new(move |g, b| {
            let p: FeaturePyramid = conv_stem(g, b, &stem, &[b.var(img)])?;
            let a = readout(g, p.maps[0][0], &r0)?;
            let c = readout(g, p.maps[0][1], &r1)?;
            g.add(a, c)
        }),
    ))
}

/// Squares its input but reports a tripled derivative.
struct CorruptedSquare;

impl CustomOp for CorruptedSquare {
    fn name(&self) -> &'static str {
        "corrupted_square"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let gx = Tensor::from_fn(x.dims(), |i| 3.0 * x.data()[i] * grad.data()[i]);
        vec![Some(gx)]
    }
}

fn case_corrupted(rng: &mut crate::SeededRng) -> Result<(ParamStore, Loss)> {
    let mut s = ParamStore::new();
    let x = leaf(&mut s, "x", &[4], 1.0, rng)?;
    Ok((
        s,
        Box::new(move |g, b| {
            let xv = g.value(b.var(x)).clone();
            let sq = Tensor::from_fn(xv.dims(), |i| xv.data()[i] * xv.data()[i]);
            let y = g.custom(&[b.var(x)], sq, CorruptedSquare);
            Ok(g.sum(y))
        }),
    ))
}

const CASES: &[(&str, Builder)] = &[
    ("linear", case_linear),
    ("matmul", case_matmul),
    ("add_sub_mul_scale", case_elementwise),
    ("add_row", case_add_row),
    ("relu", case_relu),
    ("sigmoid", case_sigmoid),
    ("sin", case_sin),
    ("cos", case_cos),
    ("sum_mean", case_reductions),
    ("concat_reshape", case_concat_reshape),
    ("softmax", case_softmax),
    ("log_softmax", case_log_softmax),
    ("gather_segment", case_gather_segment),
    ("select_rows", case_select_rows),
    ("layer_norm", case_layer_norm),
    ("conv2d", case_conv2d),
    ("avg_pool2", case_avg_pool2),
    ("bilinear_sample", case_bilinear),
    ("position_encode", case_position_encode),
    ("project_rows", case_project_rows),
    ("deformable_attention", case_deformable),
    ("pca", case_pca),
    ("gpca", case_gpca),
    ("feed_forward", case_feed_forward),
    ("occupancy_head", case_occupancy_head),
    ("weighted_ce", case_weighted_ce),
    ("dice_loss", case_dice_loss),
    ("conv_stem", case_conv_stem),
];

/// Runs every operation over `opts.seeds` seeded configurations.
pub fn grad_check_suite(opts: SuiteOptions) -> Result<SuiteReport> {
    let mut cases: Vec<(&'static str, Builder)> = CASES.to_vec();
    if opts.include_corrupted {
        cases.push(("fixture_corrupted", case_corrupted));
    }
    let cfg = FdConfig {
        max_elements: 12,
        ..FdConfig::default()
    };
    let mut ops = Vec::with_capacity(cases.len());
    for (i, (op, build)) in cases.into_iter().enumerate() {
        let mut report = OpReport {
            op,
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        };
        for k in 0..opts.seeds {
            let seed = opts.base_seed.wrapping_add(k);
            let mut rng = seeded_rng(seed.wrapping_mul(1000).wrapping_add(i as u64));
            let (store, loss) = build(&mut rng)?;
            let out = check(&store, |g, b| loss(g, b), cfg, &mut rng)?;
            report.checked += out.checked;
            if report.worst.is_none() || out.max_rel_error > report.max_rel_error {
                report.max_rel_error = out.max_rel_error;
                report.worst = out.worst.map(|(name, e)| (seed, name, e));
            }
        }
        ops.push(report);
    }
    Ok(SuiteReport { seeds: opts.seeds, ops })
}
