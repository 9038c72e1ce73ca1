use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Backbone variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Plain U-Net backbone.
    Unet,
    /// U-Net with every channel width doubled.
    Wunet,
    /// Encoder convs dilated at rate 6.
    D6unet,
    /// Encoder convs dilated at rate 9.
    D9unet,
    /// Encoder stages are false-positive attention blocks.
    Fpa,
    /// Encoder stages are reverse false-negative attention blocks.
    Rfna,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Unet,
        Variant::Wunet,
        Variant::D6unet,
        Variant::D9unet,
        Variant::Fpa,
        Variant::Rfna,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::Wunet => "wunet",
            Variant::D6unet => "d6unet",
            Variant::D9unet => "d9unet",
            Variant::Fpa => "fpa",
            Variant::Rfna => "rfna",
        }
    }

    /// Dilation applied to plain encoder convs.
    pub fn encoder_dilation(self) -> usize {
        match self {
            Variant::D6unet => 6,
            Variant::D9unet => 9,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// False-positive attention block settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpaConfig {
    /// Dilation of the shared attention conv; ablated at 6, 9 and 12.
    pub dilation: usize,
    /// Depthwise shared conv in the attention branch.
    pub depthwise: bool,
    /// Channel expansion of the first attention conv, relative to the block output.
    pub expansion: usize,
}

impl Default for FpaConfig {
    fn default() -> Self {
        FpaConfig {
            dilation: 9,
            depthwise: false,
            expansion: 1,
        }
    }
}

impl FpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation < 2 {
            return Err(Error::Config(format!(
                "FPA dilation must be ≥ 2, got {}",
                self.dilation
            )));
        }
        if self.expansion == 0 {
            return Err(Error::Config("FPA expansion ratio must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Reverse false-negative attention block settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfnaConfig {
    /// Downsampling (and matching upsampling) ratio of the attention branch: 2, 4 or 8.
    pub ratio: usize,
    /// Depthwise strided convs after the first attention conv.
    pub depthwise: bool,
    pub expansion: usize,
}

impl Default for RfnaConfig {
    fn default() -> Self {
        RfnaConfig {
            ratio: 8,
            depthwise: true,
            expansion: 4,
        }
    }
}

impl RfnaConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.ratio, 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "RFNA downsampling ratio must be 2, 4 or 8, got {}",
                self.ratio
            )));
        }
        if self.expansion == 0 {
            return Err(Error::Config("RFNA expansion ratio must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Number of stride-2 convs in the attention branch.
    pub fn strided_convs(&self) -> usize {
        self.ratio.trailing_zeros() as usize
    }
}

/// Declarative description of a segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpa: Option<FpaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rfna: Option<RfnaConfig>,
}

fn default_base_channels() -> usize {
    32
}
fn default_stages() -> usize {
    3
}
fn default_in_channels() -> usize {
    4
}
fn default_out_channels() -> usize {
    1
}

impl NetworkSpec {
    /// Defaults for `variant`, including the attention config where one applies.
    pub fn new(variant: Variant) -> Self {
        NetworkSpec {
            variant,
            base_channels: default_base_channels(),
            stages: default_stages(),
            in_channels: default_in_channels(),
            out_channels: default_out_channels(),
            fpa: (variant == Variant::Fpa).then(FpaConfig::default),
            rfna: (variant == Variant::Rfna).then(RfnaConfig::default),
        }
    }

    pub fn with_base_channels(mut self, c: usize) -> Self {
        self.base_channels = c;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    pub fn with_fpa(mut self, cfg: FpaConfig) -> Self {
        self.fpa = Some(cfg);
        self
    }

    pub fn with_rfna(mut self, cfg: RfnaConfig) -> Self {
        self.rfna = Some(cfg);
        self
    }

    /// Channel width of the stem (doubled for the wide variant).
    pub fn width(&self) -> usize {
        if self.variant == Variant::Wunet {
            2 * self.base_channels
        } else {
            self.base_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be ≥ 1".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("at least one downsampling stage is required".into()));
        }
        match (self.variant, self.fpa.is_some(), self.rfna.is_some()) {
            (Variant::Fpa, true, false) | (Variant::Rfna, false, true) => {}
            (Variant::Fpa, ..) => {
                return Err(Error::Config("variant fpa needs an FPA config and no RFNA config".into()))
            }
            (Variant::Rfna, ..) => {
                return Err(Error::Config("variant rfna needs an RFNA config and no FPA config".into()))
            }
            (_, false, false) => {}
            (v, ..) => {
                return Err(Error::Config(format!(
                    "variant {v} takes no attention config"
                )))
            }
        }
        if let Some(c) = &self.fpa {
            c.validate()?;
        }
        if let Some(c) = &self.rfna {
            c.validate()?;
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        let base = 1usize << self.stages;
        match &self.rfna {
            Some(c) => base * c.ratio,
            None => base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("aunet".parse::<Variant>().is_err());
    }

    #[test]
    fn config_consistency() {
        assert!(NetworkSpec::new(Variant::Fpa).validate().is_ok());
        let mut s = NetworkSpec::new(Variant::Unet);
        s.fpa = Some(FpaConfig::default());
        assert!(s.validate().is_err());
        let mut s = NetworkSpec::new(Variant::Rfna);
        s.rfna = None;
        assert!(s.validate().is_err());
        let s = NetworkSpec::new(Variant::Fpa).with_fpa(FpaConfig {
            dilation: 1,
            ..Default::default()
        });
        assert!(s.validate().is_err());
        let s = NetworkSpec::new(Variant::Rfna).with_rfna(RfnaConfig {
            ratio: 16,
            ..Default::default()
        });
        assert!(s.validate().is_err());
    }

    #[test]
    fn rfna_multiples() {
        assert_eq!(NetworkSpec::new(Variant::Unet).required_multiple(), 8);
        assert_eq!(NetworkSpec::new(Variant::Rfna).required_multiple(), 64);
        assert_eq!(RfnaConfig { ratio: 4, ..Default::default() }.strided_convs(), 2);
    }
}
