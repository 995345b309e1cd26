use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::diffcore::{fan_in_uniform, Bound, Graph, ParamId, ParamSink, Tensor, Var};
use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemConfig {
    pub in_channels: usize,
    pub hidden: usize,
    /// Feature width of every level.
    pub d: usize,
    pub levels: usize,
}

/// Parameter handles of the two stride-2 convolutions.
#[derive(Clone, Debug)]
pub struct Stem {
    pub cfg: StemConfig,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-view feature maps, `maps[view][level]` of dims `[h_l, w_l, d]`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub maps: Vec<Vec<Var>>,
}

impl FeaturePyramid {
    pub fn views(&self) -> usize {
        self.maps.len()
    }

    pub fn levels(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }
}

impl Stem {
    pub fn init<R: Rng + ?Sized>(store: &mut dyn ParamSink, prefix: &str, cfg: StemConfig, rng: &mut R) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.hidden == 0 || cfg.d == 0 {
            bail!(Config, "stem widths must be positive");
        }
        if cfg.levels == 0 {
            bail!(Config, "stem needs at least one level");
        }
        let (ci, h, d) = (cfg.in_channels, cfg.hidden, cfg.d);
        let relu = core::f64::consts::SQRT_2;
        Ok(Self {
            cfg,
            w1: store.param(&format!("{prefix}.conv1.w"), fan_in_uniform(&[3, 3, ci, h], 9 * ci, relu, rng))?,
            b1: store.param(&format!("{prefix}.conv1.b"), Tensor::zeros(&[h]))?,
            w2: store.param(&format!("{prefix}.conv2.w"), fan_in_uniform(&[3, 3, h, d], 9 * h, relu, rng))?,
            b2: store.param(&format!("{prefix}.conv2.b"), Tensor::zeros(&[d]))?,
        })
    }

    /// Handles of a stem already present in `store`.
    pub fn attach(store: &crate::diffcore::ParamStore, prefix: &str, cfg: StemConfig) -> Result<Self> {
        Self::init(&mut crate::diffcore::Attach(store), prefix, cfg, &mut crate::seeded_rng(0))
    }
}

/// Two 3x3 stride-2 convolutions with ReLU give level 0 at quarter
/// resolution; each further level is a 2x average pool of the previous one.
pub fn conv_stem(g: &mut Graph, bound: &Bound, stem: &Stem, images: &[Var]) -> Result<FeaturePyramid> {
    let mut maps = Vec::with_capacity(images.len());
    for &img in images {
        let dims = g.dims(img);
        if dims.len() != 3 || dims[0] < 4 || dims[1] < 4 {
            bail!(Config, "stem input must be at least 4 x 4, got {:?}", dims);
        }
        if dims[2] != stem.cfg.in_channels {
            bail!(Config, "stem expects {} channels, got {}", stem.cfg.in_channels, dims[2]);
        }
        let x = g.conv2d(img, bound.var(stem.w1), bound.var(stem.b1), 2, 1)?;
        let x = g.relu(x);
        let x = g.conv2d(x, bound.var(stem.w2), bound.var(stem.b2), 2, 1)?;
        let mut level = g.relu(x);
        let mut levels = Vec::with_capacity(stem.cfg.levels);
        levels.push(level);
        for _ in 1..stem.cfg.levels {
            level = g.avg_pool2(level)?;
            levels.push(level);
        }
        maps.push(levels);
    }
    Ok(FeaturePyramid { maps })
}
