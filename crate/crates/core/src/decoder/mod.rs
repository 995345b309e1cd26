//! The point decoder: position encoder, stacked PCA / GPCA / feed-forward
//! layers and the occupancy head, with a full and an early-exit path.

mod attention;
mod layer;

pub use attention::{deform_sample, level_coord, project_rows, AttnShape, HitPairs, STEM_STRIDE};
pub use layer::{feed_forward, group_point_cross_attention, point_cross_attention, Attention, GroupCoords, Linear, Mlp, Norm};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::{Attach, Bound, Graph, ParamSink, ParamStore, Tensor, Var};
use crate::error::{bail, Result};
use crate::geometry::{normalize_points, CameraRig, SceneBounds};
use crate::math::{self, Vec3};
use crate::synthworld::FeaturePyramid;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub levels: usize,
    pub samples: usize,
    pub groups: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    /// Output classes including empty.
    pub classes: usize,
    /// Average GPCA over group members (otherwise sum).
    pub member_mean: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d: 48,
            heads: 4,
            levels: 4,
            samples: 8,
            groups: 4,
            layers: 3,
            ffn_hidden: 96,
            head_hidden: 48,
            classes: 7,
            member_mean: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 6 != 0 {
            bail!(Config, "feature width {} must be a positive multiple of 6", self.d);
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            bail!(Config, "feature width {} not divisible by {} heads", self.d, self.heads);
        }
        for (name, v) in [
            ("levels", self.levels),
            ("samples", self.samples),
            ("groups", self.groups),
            ("layers", self.layers),
            ("ffn_hidden", self.ffn_hidden),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                bail!(Config, "{} must be positive", name);
            }
        }
        if self.classes < 2 {
            bail!(Config, "need at least two output classes");
        }
        Ok(())
    }

    pub fn attn_shape(&self) -> AttnShape {
        AttnShape {
            d: self.d,
            heads: self.heads,
            levels: self.levels,
            samples: self.samples,
        }
    }
}

/// Sine/cosine expansion of normalized coordinates to `d` values: for axis
/// `a` and frequency `f < d / 6`, entries `2 (a F + f)` and `2 (a F + f) + 1`
/// hold `sin(2^f pi v_a)` and `cos(2^f pi v_a)`.
pub fn fourier_features(points_norm: &[Vec3], d: usize) -> Result<Tensor> {
    if d == 0 || d % 6 != 0 {
        bail!(Config, "encoding width {} must be a positive multiple of 6", d);
    }
    let f = d / 6;
    let mut t = Tensor::zeros(&[points_norm.len(), d]);
    for (row, p) in t.data_mut().chunks_exact_mut(d).zip(points_norm) {
        for a in 0..3 {
            for k in 0..f {
                let x = math::powi(2.0, k as i32) * core::f64::consts::PI * p[a];
                row[2 * (a * f + k)] = math::sin(x);
                row[2 * (a * f + k) + 1] = math::cos(x);
            }
        }
    }
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub pca: Attention,
    pub pca_norm: Norm,
    pub gpca: Attention,
    pub group: GroupCoords,
    pub gpca_norm: Norm,
    pub ffn: Mlp,
    pub ffn_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub posenc: Mlp,
    pub layers: Vec<DecoderLayer>,
    pub head: Mlp,
}

/// Value maps of every layer for one feature pyramid.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// `[layer] -> (pca maps, gpca maps)`, each `[view][level]`.
    pub(crate) values: Vec<(Vec<Vec<Var>>, Vec<Vec<Var>>)>,
}

/// Result of a full-mode forward pass.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub logits: Var,
    pub content: Var,
    pub pos: Var,
}

/// Result of early-exit inference.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyExit {
    pub logits: Tensor,
    /// Layer (1-based) after which each point's logits were taken.
    pub exit_layer: Vec<usize>,
    /// Points processed by each layer.
    pub active: Vec<usize>,
}

impl EarlyExit {
    /// Executed point-layer evaluations over the full-mode count.
    pub fn relative_computation(&self) -> f64 {
        let n = self.logits.rows();
        let total = (n * self.active.len()) as f64;
        if total == 0.0 {
            return 1.0;
        }
        self.active.iter().sum::<usize>() as f64 / total
    }
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(store: &mut dyn ParamSink, cfg: DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let shape = cfg.attn_shape();
        let posenc = Mlp::init(store, "posenc", [d, d, d], rng)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let p = format!("layer{l}");
            layers.push(DecoderLayer {
                pca: Attention::init(store, &format!("{p}.pca"), shape, rng)?,
                pca_norm: Norm::init(store, &format!("{p}.pca.norm"), d)?,
                gpca: Attention::init(store, &format!("{p}.gpca"), shape, rng)?,
                group: GroupCoords::init(store, &format!("{p}.gpca.group"), d, cfg.groups, rng)?,
                gpca_norm: Norm::init(store, &format!("{p}.gpca.norm"), d)?,
                ffn: Mlp::init(store, &format!("{p}.ffn"), [d, cfg.ffn_hidden, d], rng)?,
                ffn_norm: Norm::init(store, &format!("{p}.ffn.norm"), d)?,
            });
        }
        let head = Mlp::init(store, "head", [d, cfg.head_hidden, cfg.classes], rng)?;
        Ok(Self { cfg, posenc, layers, head })
    }

    /// Handles of a decoder already present in `store` (for example after
    /// loading a checkpoint).
    pub fn attach(store: &ParamStore, cfg: DecoderConfig) -> Result<Self> {
        Self::init(&mut Attach(store), cfg, &mut crate::seeded_rng(0))
    }

    pub fn param_prefix(name: &str) -> bool {
        name.starts_with("posenc.") || name.starts_with("layer") || name.starts_with("head.")
    }

    pub fn prepare(&self, g: &mut Graph, b: &Bound, pyramid: &FeaturePyramid) -> Result<Prepared> {
        if pyramid.levels() != self.cfg.levels {
            bail!(Contract, "pyramid has {} levels, decoder expects {}", pyramid.levels(), self.cfg.levels);
        }
        let values = self
            .layers
            .iter()
            .map(|l| Ok((l.pca.project_values(g, b, &pyramid.maps)?, l.gpca.project_values(g, b, &pyramid.maps)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { values })
    }

    pub fn position_encode(&self, g: &mut Graph, b: &Bound, points: &[Vec3], bounds: &SceneBounds) -> Result<Var> {
        let norm = normalize_points(points, bounds)?;
        let raw = g.constant(fourier_features(&norm, self.cfg.d)?);
        self.posenc.apply(g, b, raw)
    }

    pub fn occupancy_head(&self, g: &mut Graph, b: &Bound, content: Var) -> Result<Var> {
        self.head.apply(g, b, content)
    }

    /// One decoder layer over the given points.
    #[allow(clippy::too_many_arguments)]
    pub fn layer(
        &self,
        g: &mut Graph,
        b: &Bound,
        prep: &Prepared,
        index: usize,
        content: Var,
        pos: Var,
        points: &[Vec3],
        rig: &CameraRig,
    ) -> Result<Var> {
        let l = &self.layers[index];
        let (pca_vals, gpca_vals) = &prep.values[index];
        let hits = HitPairs::compute(points, &rig.cameras);
        let x = point_cross_attention(g, b, &l.pca, &l.pca_norm, pca_vals, content, pos, &hits)?;
        let x = group_point_cross_attention(
            g,
            b,
            &l.gpca,
            &l.group,
            &l.gpca_norm,
            gpca_vals,
            x,
            pos,
            points,
            rig,
            self.cfg.member_mean,
        )?;
        feed_forward(g, b, &l.ffn, &l.ffn_norm, x)
    }

    /// All layers, then the head; `[N, classes]` logits.
    pub fn forward(&self, g: &mut Graph, b: &Bound, prep: &Prepared, points: &[Vec3], bounds: &SceneBounds, rig: &CameraRig) -> Result<Decoded> {
        if points.is_empty() {
            bail!(Contract, "decode needs at least one point");
        }
        let pos = self.position_encode(g, b, points, bounds)?;
        let mut content = g.constant(Tensor::zeros(&[points.len(), self.cfg.d]));
        for i in 0..self.layers.len() {
            content = self.layer(g, b, prep, i, content, pos, points, rig)?;
        }
        let logits = self.occupancy_head(g, b, content)?;
        Ok(Decoded { logits, content, pos })
    }

    /// Early-exit inference: after every non-final layer, points whose top
    /// class probability reaches `threshold` keep that layer's logits and
    /// skip the remaining layers.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_early_exit(
        &self,
        g: &mut Graph,
        b: &Bound,
        prep: &Prepared,
        points: &[Vec3],
        bounds: &SceneBounds,
        rig: &CameraRig,
        threshold: f64,
    ) -> Result<EarlyExit> {
        if points.is_empty() {
            bail!(Contract, "decode needs at least one point");
        }
        let n = points.len();
        let c = self.cfg.classes;
        let mut logits = Tensor::zeros(&[n, c]);
        let mut exit_layer = vec![0; n];
        let mut active_counts = Vec::with_capacity(self.layers.len());

        let mut rows: Vec<usize> = (0..n).collect();
        let mut pts: Vec<Vec3> = points.to_vec();
        let mut pos = self.position_encode(g, b, points, bounds)?;
        let mut content = g.constant(Tensor::zeros(&[n, self.cfg.d]));
        for i in 0..self.layers.len() {
            active_counts.push(rows.len());
            content = self.layer(g, b, prep, i, content, pos, &pts, rig)?;
            let out = self.occupancy_head(g, b, content)?;
            let last = i + 1 == self.layers.len();
            let lv = g.value(out);
            let mut keep = Vec::new();
            for (local, &global) in rows.iter().enumerate() {
                let row = lv.row(local);
                let exits = last || max_softmax(row) >= threshold;
                if exits {
                    logits.data_mut()[global * c..(global + 1) * c].copy_from_slice(row);
                    exit_layer[global] = i + 1;
                } else {
                    keep.push(local);
                }
            }
            if last || keep.is_empty() {
                break;
            }
            if keep.len() < rows.len() {
                rows = keep.iter().map(|&k| rows[k]).collect();
                pts = keep.iter().map(|&k| pts[k]).collect();
                content = g.gather_rows(content, keep.clone())?;
                pos = g.gather_rows(pos, keep)?;
            }
        }
        Ok(EarlyExit {
            logits,
            exit_layer,
            active: active_counts,
        })
    }

    /// Inference in chunks of `chunk` points; the graph is rolled back after
    /// each chunk so only `prep` stays alive. `threshold = None` runs the full
    /// path.
    #[allow(clippy::too_many_arguments)]
    pub fn infer(
        &self,
        g: &mut Graph,
        b: &Bound,
        prep: &Prepared,
        points: &[Vec3],
        bounds: &SceneBounds,
        rig: &CameraRig,
        threshold: Option<f64>,
        chunk: usize,
    ) -> Result<EarlyExit> {
        if chunk == 0 {
            bail!(Config, "chunk size must be positive");
        }
        let c = self.cfg.classes;
        let mut logits = Vec::with_capacity(points.len() * c);
        let mut exit_layer = Vec::with_capacity(points.len());
        let mut active = vec![0; self.layers.len()];
        for part in points.chunks(chunk) {
            let mark = g.len();
            let out = match threshold {
                Some(t) => self.forward_early_exit(g, b, prep, part, bounds, rig, t)?,
                None => {
                    let d = self.forward(g, b, prep, part, bounds, rig)?;
                    EarlyExit {
                        logits: g.value(d.logits).clone(),
                        exit_layer: vec![self.layers.len(); part.len()],
                        active: vec![part.len(); self.layers.len()],
                    }
                }
            };
            g.truncate(mark);
            logits.extend_from_slice(out.logits.data());
            exit_layer.extend(out.exit_layer);
            for (a, x) in active.iter_mut().zip(out.active) {
                *a += x;
            }
        }
        Ok(EarlyExit {
            logits: Tensor::new(&[points.len(), c], logits)?,
            exit_layer,
            active,
        })
    }
}

fn max_softmax(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| math::exp(v - m)).sum();
    1.0 / z
}

/// Row-wise softmax of a logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - m);
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}
