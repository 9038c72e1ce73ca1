//! TOML run configuration.
//!
//! ```toml
//! [model]
//! variant = "fpa"
//! base_channels = 32
//! dilation = 9
//!
//! [train]
//! preset = "brats"
//! epochs = 40
//! batch = 8
//! lr = 1e-4
//! seed = 0
//!
//! [data]
//! kind = "synthetic"
//! n_train = 140
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use erfseg::model::{FpaConfig, NetworkSpec, RfnaConfig, Variant};
use erfseg::train::{SyntheticTaskConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub base_channels: usize,
    pub stages: usize,
    /// FPA shared-conv dilation.
    pub dilation: Option<usize>,
    /// RFNA down/up-sampling ratio.
    pub ratio: Option<usize>,
    pub depthwise: Option<bool>,
    pub expansion: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::Unet,
            base_channels: 32,
            stages: 3,
            dilation: None,
            ratio: None,
            depthwise: None,
            expansion: None,
        }
    }
}

impl ModelSection {
    pub fn network_spec(&self, in_channels: usize) -> anyhow::Result<NetworkSpec> {
        let mut spec = NetworkSpec::new(self.variant).with_base_channels(self.base_channels).with_in_channels(in_channels);
        spec.stages = self.stages;
        match self.variant {
            Variant::Fpa => {
                let mut c = FpaConfig::default();
                if self.ratio.is_some() {
                    bail!(ConfigError("`ratio` applies to rfna, not fpa".into()));
                }
                c.dilation = self.dilation.unwrap_or(c.dilation);
                c.depthwise = self.depthwise.unwrap_or(c.depthwise);
                c.expansion = self.expansion.unwrap_or(c.expansion);
                spec = spec.with_fpa(c);
            }
            Variant::Rfna => {
                let mut c = RfnaConfig::default();
                if self.dilation.is_some() {
                    bail!(ConfigError("`dilation` applies to fpa, not rfna".into()));
                }
                c.ratio = self.ratio.unwrap_or(c.ratio);
                c.depthwise = self.depthwise.unwrap_or(c.depthwise);
                c.expansion = self.expansion.unwrap_or(c.expansion);
                spec = spec.with_rfna(c);
            }
            v => {
                if self.dilation.is_some() || self.ratio.is_some() || self.depthwise.is_some() || self.expansion.is_some() {
                    bail!(ConfigError(format!("variant {v} takes no attention settings")));
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// `cityscapes`, `brats`, `isles` or `default`.
    pub preset: Option<String>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub weight_decay: Option<f64>,
    pub hflip: Option<f64>,
}

impl TrainSection {
    pub fn train_config(&self, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.preset {
            Some(p) => TrainConfig::preset(p)?,
            None => TrainConfig::default(),
        };
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.batch_size = self.batch.unwrap_or(c.batch_size);
        c.learning_rate = self.lr.unwrap_or(c.learning_rate);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.augment_hflip_prob = self.hflip.unwrap_or(c.augment_hflip_prob);
        c.seed = seed.or(self.seed).unwrap_or(c.seed);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synthetic,
    TsrDir,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Dataset directory for `kind = "tsr_dir"`.
    pub path: Option<PathBuf>,
    #[serde(flatten)]
    pub synthetic: SyntheticTaskConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::Error::new(ConfigError(format!("{}: {e}", path.display()))))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
