//! Training configuration. A TOML file may supply any subset of fields;
//! command-line flags override the file.

use std::path::Path;

use osp_core::decoder::DecoderConfig;
use osp_core::synthworld::StemConfig;
use serde::{Deserialize, Serialize};

use crate::error::{usage, OspError, Result};

/// Largest accepted seed; manifests store seeds as TOML integers.
pub const MAX_SEED: u64 = i64::MAX as u64;

fn check_seed(seed: u64) -> Result<()> {
    if seed > MAX_SEED {
        usage!("seed must be at most {MAX_SEED}, got {seed}");
    }
    Ok(())
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| OspError::Usage(format!("config: {e}")))
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| OspError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes whose gradients are summed per optimizer step.
    pub batch_scenes: usize,
    /// Training points sampled per scene and step.
    pub points: usize,
    pub lr: f64,
    pub stem_lr_mult: f64,
    pub weight_decay: f64,
    pub layers: usize,
    pub levels: usize,
    pub groups: usize,
    pub heads: usize,
    pub samples: usize,
    pub d: usize,
    pub stem_hidden: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    /// Training point jitter in meters; 0 disables it.
    pub perturb: f64,
    pub dice: bool,
    pub member_mean: bool,
    pub seed: u64,
    /// Trailing dataset scenes held out for validation.
    pub val_scenes: usize,
    /// Validate every this many epochs (and after the last); 0 validates
    /// only after the last.
    pub val_every: usize,
    /// Restricts training points to the centered box covering this fraction
    /// of the scene's x and y extent.
    pub inner: Option<f64>,
    /// Points per inference chunk.
    pub chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_scenes: 1,
            points: 256,
            lr: 1e-3,
            stem_lr_mult: 0.1,
            weight_decay: 0.01,
            layers: 3,
            levels: 4,
            groups: 4,
            heads: 4,
            samples: 8,
            d: 48,
            stem_hidden: 16,
            ffn_hidden: 96,
            head_hidden: 48,
            perturb: 0.2,
            dice: true,
            member_mean: true,
            seed: 0,
            val_scenes: 16,
            val_every: 3,
            inner: None,
            chunk: 1024,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_config(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_scenes", self.batch_scenes),
            ("points", self.points),
            ("val_scenes", self.val_scenes),
            ("chunk", self.chunk),
            ("stem_hidden", self.stem_hidden),
        ] {
            if v == 0 {
                usage!("{name} must be positive");
            }
        }
        // lr = 0 is accepted and freezes the parameters
        for (name, v) in [("lr", self.lr), ("stem_lr_mult", self.stem_lr_mult), ("weight_decay", self.weight_decay), ("perturb", self.perturb)] {
            if !(v.is_finite() && v >= 0.0) {
                usage!("{name} must be finite and non-negative, got {v}");
            }
        }
        if let Some(f) = self.inner {
            if !(f > 0.0 && f <= 1.0) {
                usage!("inner fraction must be in (0, 1], got {f}");
            }
        }
        check_seed(self.seed)?;
        self.decoder_config(7).validate()?;
        Ok(())
    }

    pub fn decoder_config(&self, classes: usize) -> DecoderConfig {
        DecoderConfig {
            d: self.d,
            heads: self.heads,
            levels: self.levels,
            samples: self.samples,
            groups: self.groups,
            layers: self.layers,
            ffn_hidden: self.ffn_hidden,
            head_hidden: self.head_hidden,
            classes,
            member_mean: self.member_mean,
        }
    }

    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        ModelSpec {
            classes,
            in_channels: classes + 1,
            stem_hidden: self.stem_hidden,
            d: self.d,
            heads: self.heads,
            levels: self.levels,
            samples: self.samples,
            groups: self.groups,
            layers: self.layers,
            ffn_hidden: self.ffn_hidden,
            head_hidden: self.head_hidden,
            member_mean: self.member_mean,
        }
    }
}

/// Architecture of a point model, stored inside its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Output classes including empty.
    pub classes: usize,
    pub in_channels: usize,
    pub stem_hidden: usize,
    pub d: usize,
    pub heads: usize,
    pub levels: usize,
    pub samples: usize,
    pub groups: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub head_hidden: usize,
    pub member_mean: bool,
}

impl ModelSpec {
    pub fn stem(&self) -> StemConfig {
        StemConfig {
            in_channels: self.in_channels,
            hidden: self.stem_hidden,
            d: self.d,
            levels: self.levels,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d: self.d,
            heads: self.heads,
            levels: self.levels,
            samples: self.samples,
            groups: self.groups,
            layers: self.layers,
            ffn_hidden: self.ffn_hidden,
            head_hidden: self.head_hidden,
            classes: self.classes,
            member_mean: self.member_mean,
        }
    }
}

/// Settings of the volume baseline trained on a frozen point-model stem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub points: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub dice: bool,
    pub seed: u64,
    pub val_scenes: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            points: 1024,
            lr: 1e-3,
            weight_decay: 0.01,
            hidden: 32,
            dice: true,
            seed: 0,
            val_scenes: 16,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.points == 0 || self.hidden == 0 || self.val_scenes == 0 {
            usage!("baseline epochs, points, hidden and val_scenes must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            usage!("baseline lr and weight_decay must be finite and non-negative");
        }
        check_seed(self.seed)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_config(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub classes: usize,
    pub d: usize,
    pub hidden: usize,
    pub stem: ModelSpec,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.stem_lr_mult, 0.1);
        assert_eq!(c.weight_decay, 0.01);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = TrainConfig::from_toml("epochs = 2\nlayers = 1\n").unwrap();
        assert_eq!(c.epochs, 2);
        assert_eq!(c.layers, 1);
        assert_eq!(c.points, TrainConfig::default().points);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(TrainConfig::from_toml("epoch = 2"), Err(OspError::Usage(_))));
        let c = TrainConfig { lr: -1.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { d: 50, ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { inner: Some(1.5), ..TrainConfig::default() };
        assert!(c.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_ok());
        assert!(TrainConfig { seed: MAX_SEED + 1, ..TrainConfig::default() }.validate().is_err());
        assert!(BaselineConfig { seed: MAX_SEED + 1, ..BaselineConfig::default() }.validate().is_err());
    }
}
