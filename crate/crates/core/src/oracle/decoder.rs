//! Loop-level reference implementations of the attention operators and the
//! matching library calls for one query or a handful of points.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::OracleCheck;
use crate::decoder::*;
use crate::diffcore::{Graph, ParamStore, Tensor};
use crate::geometry::{Camera, CameraRig, SceneBounds};
use crate::gradcheck::random_tensor;
use crate::math::{self, Vec3};
use crate::seeded_rng;
use crate::synthworld::FeaturePyramid;

pub fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(store.id(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (i, o) = (w.dims()[0], w.dims()[1]);
    (0..o)
        .map(|j| b.data()[j] + (0..i).map(|k| x[k] * w.data()[k * o + j]).sum::<f64>())
        .collect()
}

pub fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / math::sqrt(var + 1e-5) * g.data()[j] + b.data()[j])
        .collect()
}

/// Zero-padded bilinear read of a `[h, w, c]` map at `(y, x)`.
pub fn bilerp(map: &Tensor, y: f64, x: f64) -> Vec<f64> {
    let (h, w, c) = (map.dims()[0] as isize, map.dims()[1] as isize, map.dims()[2]);
    let (y0, x0) = (math::floor(y), math::floor(x));
    let mut out = vec![0.0; c];
    for (dy, dx) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
        let (yy, xx) = (y0 + dy, x0 + dx);
        let wt = (1.0 - math::abs(y - yy)) * (1.0 - math::abs(x - xx));
        let (yi, xi) = (yy as isize, xx as isize);
        if yi < 0 || xi < 0 || yi >= h || xi >= w {
            continue;
        }
        for ch in 0..c {
            out[ch] += wt * map.data()[((yi * w + xi) as usize) * c + ch];
        }
    }
    out
}

/// Feature coordinate of image coordinate `u` on `level`, from the lattice
/// positions: level 0 cell j sits at image coordinate 4 j + 0.5 and each
/// pooled cell sits midway between its two parents.
pub fn lattice(u: f64, level: usize) -> f64 {
    let (mut a, mut b) = (0.5, 4.0);
    for _ in 0..level {
        a += b / 2.0;
        b *= 2.0;
    }
    (u - a) / b
}

/// Attention before the output projection, one query, one view.
pub fn attention_oracle(store: &ParamStore, name: &str, shape: AttnShape, q: &[f64], uv: [f64; 2], maps: &[Tensor]) -> Vec<f64> {
    let off = affine(q, p(store, &format!("{name}.offset.weight")), p(store, &format!("{name}.offset.bias")));
    let logits = affine(q, p(store, &format!("{name}.attn.weight")), p(store, &format!("{name}.attn.bias")));
    let (vw, vb) = (p(store, &format!("{name}.value.weight")), p(store, &format!("{name}.value.bias")));
    let values: Vec<Tensor> = maps
        .iter()
        .map(|m| {
            let (h, w, d) = (m.dims()[0], m.dims()[1], m.dims()[2]);
            let mut t = Tensor::zeros(&[h, w, d]);
            for px in 0..h * w {
                let v = affine(&m.data()[px * d..(px + 1) * d], vw, vb);
                t.data_mut()[px * d..(px + 1) * d].copy_from_slice(&v);
            }
            t
        })
        .collect();
    let dh = shape.d / shape.heads;
    let mut out = vec![0.0; shape.d];
    for h in 0..shape.heads {
        let mut taps = Vec::new();
        for l in 0..shape.levels {
            for s in 0..shape.samples {
                taps.push(((h * shape.levels + l) * shape.samples + s, l));
            }
        }
        let mx = taps.iter().map(|&(t, _)| logits[t]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = taps.iter().map(|&(t, _)| math::exp(logits[t] - mx)).sum();
        for &(t, l) in &taps {
            let a = math::exp(logits[t] - mx) / z;
            let x = lattice(uv[0], l) + off[2 * t];
            let y = lattice(uv[1], l) + off[2 * t + 1];
            let sample = bilerp(&values[l], y, x);
            for c in 0..dh {
                out[h * dh + c] += a * sample[h * dh + c];
            }
        }
    }
    out
}

pub fn small_rig() -> CameraRig {
    let a = Camera::looking([0.0, 0.0, 0.0], 0.0, 0.0, 1.6, 16, 12).unwrap();
    let b = Camera::looking([0.0, 0.0, 0.0], 1.2, 0.0, 1.6, 16, 12).unwrap();
    CameraRig::new(vec![a, b]).unwrap()
}

pub fn small_cfg() -> DecoderConfig {
    DecoderConfig {
        d: 12,
        heads: 2,
        levels: 2,
        samples: 2,
        groups: 3,
        layers: 2,
        ffn_hidden: 10,
        head_hidden: 9,
        classes: 4,
        member_mean: true,
    }
}

/// Random maps for each view, `[view][level]` with level 0 of `4 x 5`.
pub fn random_maps(views: usize, levels: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<Tensor>> {
    (0..views)
        .map(|_| {
            (0..levels)
                .map(|l| random_tensor(&[(3usize).div_ceil(1 << l).max(1), 4usize.div_ceil(1 << l), d], 1.0, rng))
                .collect()
        })
        .collect()
}

pub fn bind_maps(g: &mut Graph, maps: &[Vec<Tensor>]) -> FeaturePyramid {
    FeaturePyramid {
        maps: maps.iter().map(|v| v.iter().map(|m| g.constant(m.clone())).collect()).collect(),
    }
}

/// Randomizes every parameter so that biases and norms are exercised too.
pub fn jitter(store: &mut ParamStore, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn points_in_view(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| [rng.gen_range(2.0..6.0), rng.gen_range(-2.0..4.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

/// Library path for a single query, view 0.
pub fn attention_lib(store: &ParamStore, attn: &Attention, q: &[f64], uv: [f64; 2], maps: &[Tensor]) -> Vec<f64> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, |_| false);
    let mv = vec![maps.iter().map(|m| g.constant(m.clone())).collect::<Vec<_>>()];
    let values = attn.project_values(&mut g, &b, &mv).unwrap();
    let qv = g.constant(Tensor::new(&[1, q.len()], q.to_vec()).unwrap());
    let (off, w) = attn.taps(&mut g, &b, qv).unwrap();
    let uvv = g.constant(Tensor::new(&[1, 2], uv.to_vec()).unwrap());
    let s = attn.sample(&mut g, &values, off, w, vec![0], vec![0], uvv).unwrap();
    g.value(s).data().to_vec()
}

pub struct Fixture {
    pub store: ParamStore,
    pub dec: Decoder,
    pub rig: CameraRig,
    pub maps: Vec<Vec<Tensor>>,
    pub points: Vec<Vec3>,
    pub bounds: SceneBounds,
}

pub fn fixture(seed: u64, cfg: DecoderConfig, n: usize) -> Fixture {
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let dec = Decoder::init(&mut store, cfg, &mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.3);
    let rig = small_rig();
    let maps = random_maps(rig.len(), cfg.levels, cfg.d, &mut rng);
    let points = points_in_view(&mut rng, n);
    let bounds = SceneBounds::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0]).unwrap();
    Fixture {
        store,
        dec,
        rig,
        maps,
        points,
        bounds,
    }
}

pub fn pca_oracle(fx: &Fixture, content: &Tensor, pos: &Tensor) -> Tensor {
    let shape = fx.dec.cfg.attn_shape();
    let d = shape.d;
    let s = &fx.store;
    let mut out = content.clone();
    for (i, &pt) in fx.points.iter().enumerate() {
        let q: Vec<f64> = content.row(i).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        let mut acc = vec![0.0; d];
        let mut views = 0;
        for (v, cam) in fx.rig.cameras.iter().enumerate() {
            let pr = cam.project(pt);
            if !pr.hit {
                continue;
            }
            views += 1;
            let a = attention_oracle(s, "layer1.pca", shape, &q, pr.uv, &fx.maps[v]);
            acc.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        }
        if views == 0 {
            continue;
        }
        acc.iter_mut().for_each(|x| *x /= views as f64);
        let o = affine(&acc, p(s, "layer1.pca.out.weight"), p(s, "layer1.pca.out.bias"));
        let res: Vec<f64> = o.iter().zip(content.row(i)).map(|(a, b)| a + b).collect();
        let n = layer_norm(&res, p(s, "layer1.pca.norm.weight"), p(s, "layer1.pca.norm.bias"));
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&n);
    }
    out
}

pub fn pca_lib(fx: &Fixture, content: &Tensor, pos: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = fx.store.bind(&mut g, |_| false);
    let pyr = bind_maps(&mut g, &fx.maps);
    let prep = fx.dec.prepare(&mut g, &b, &pyr).unwrap();
    let l = &fx.dec.layers[0];
    let c = g.constant(content.clone());
    let ps = g.constant(pos.clone());
    let hits = HitPairs::compute(&fx.points, &fx.rig.cameras);
    let out = point_cross_attention(&mut g, &b, &l.pca, &l.pca_norm, &prep.values[0].0, c, ps, &hits).unwrap();
    g.value(out).clone()
}

pub fn gpca_oracle(fx: &Fixture, content: &Tensor, pos: &Tensor) -> Tensor {
    let cfg = fx.dec.cfg;
    let shape = cfg.attn_shape();
    let (d, gs) = (cfg.d, cfg.groups);
    let s = &fx.store;
    let mut out = content.clone();
    for (i, &pt) in fx.points.iter().enumerate() {
        let c = content.row(i);
        let q: Vec<f64> = c.iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        let offs = affine(c, p(s, "layer1.gpca.group.weight"), p(s, "layer1.gpca.group.bias"));
        let mut acc = vec![0.0; d];
        let mut members = 0;
        for m in 0..gs {
            let gp = [pt[0] + offs[3 * m], pt[1] + offs[3 * m + 1], pt[2] + offs[3 * m + 2]];
            let mut macc = vec![0.0; d];
            let mut views = 0;
            for (v, cam) in fx.rig.cameras.iter().enumerate() {
                let pr = cam.project(gp);
                if pr.hit {
                    views += 1;
                    let a = attention_oracle(s, "layer1.gpca", shape, &q, pr.uv, &fx.maps[v]);
                    macc.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
                }
            }
            if views > 0 {
                members += 1;
                acc.iter_mut().zip(&macc).for_each(|(x, y)| *x += y / views as f64);
            }
        }
        if members == 0 {
            continue;
        }
        if cfg.member_mean {
            acc.iter_mut().for_each(|x| *x /= members as f64);
        }
        let o = affine(&acc, p(s, "layer1.gpca.out.weight"), p(s, "layer1.gpca.out.bias"));
        let res: Vec<f64> = o.iter().zip(c).map(|(a, b)| a + b).collect();
        let n = layer_norm(&res, p(s, "layer1.gpca.norm.weight"), p(s, "layer1.gpca.norm.bias"));
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&n);
    }
    out
}

pub fn gpca_lib(fx: &Fixture, content: &Tensor, pos: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = fx.store.bind(&mut g, |_| false);
    let pyr = bind_maps(&mut g, &fx.maps);
    let prep = fx.dec.prepare(&mut g, &b, &pyr).unwrap();
    let l = &fx.dec.layers[0];
    let c = g.constant(content.clone());
    let ps = g.constant(pos.clone());
    let out = group_point_cross_attention(
        &mut g,
        &b,
        &l.gpca,
        &l.group,
        &l.gpca_norm,
        &prep.values[0].1,
        c,
        ps,
        &fx.points,
        &fx.rig,
        fx.dec.cfg.member_mean,
    )
    .unwrap();
    g.value(out).clone()
}


fn max_dev(worst: &mut f64, a: &[f64], b: &[f64]) {
    for (x, y) in a.iter().zip(b) {
        *worst = worst.max(math::abs(x - y));
    }
}

/// Deformable attention of one query against the loop oracle.
pub fn deformable_attention(seeds: u64) -> OracleCheck {
    let shape = AttnShape {
        d: 8,
        heads: 2,
        levels: 2,
        samples: 2,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = seeded_rng(1000 + seed);
        let mut store = ParamStore::new();
        let attn = Attention::init(&mut store, "a", shape, &mut rng).unwrap();
        jitter(&mut store, &mut rng, 0.8);
        let maps = vec![random_tensor(&[5, 7, 8], 1.0, &mut rng), random_tensor(&[3, 4, 8], 1.0, &mut rng)];
        let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let uv = [rng.gen_range(-2.0..30.0), rng.gen_range(-2.0..22.0)];
        let got = attention_lib(&store, &attn, &q, uv, &maps);
        max_dev(&mut worst, &got, &attention_oracle(&store, "a", shape, &q, uv, &maps));
    }
    OracleCheck::new("deformable_attention", seeds, worst, 0)
}

/// Point cross-attention over two views; one point sits behind both cameras
/// and must pass through unchanged.
pub fn pca(seeds: u64) -> OracleCheck {
    let mut worst: f64 = 0.0;
    let mut mismatches = 0;
    for seed in 0..seeds {
        let mut fx = fixture(2000 + seed, small_cfg(), 3);
        fx.points[2] = [-5.0, 0.3, 0.0];
        let mut rng = seeded_rng(seed);
        let content = random_tensor(&[3, 12], 1.0, &mut rng);
        let pos = random_tensor(&[3, 12], 1.0, &mut rng);
        let got = pca_lib(&fx, &content, &pos);
        max_dev(&mut worst, got.data(), pca_oracle(&fx, &content, &pos).data());
        mismatches += usize::from(got.row(2) != content.row(2));
    }
    OracleCheck::new("pca", seeds, worst, mismatches)
}

/// Group point cross-attention with meter-scale member offsets, with and
/// without the member mean.
pub fn gpca(seeds: u64) -> OracleCheck {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        for member_mean in [true, false] {
            let cfg = DecoderConfig {
                member_mean,
                ..small_cfg()
            };
            let mut fx = fixture(3000 + seed, cfg, 2);
            let mut rng = seeded_rng(seed);
            let w = random_tensor(&[12, 9], 1.5, &mut rng);
            fx.store.set("layer1.gpca.group.weight", w).unwrap();
            let content = random_tensor(&[2, 12], 1.0, &mut rng);
            let pos = random_tensor(&[2, 12], 1.0, &mut rng);
            let got = gpca_lib(&fx, &content, &pos);
            max_dev(&mut worst, got.data(), gpca_oracle(&fx, &content, &pos).data());
        }
    }
    OracleCheck::new("gpca", seeds, worst, 0)
}
