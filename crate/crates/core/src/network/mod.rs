//! The dilated dense attention U-Net family and the tensor engine it runs on.

pub mod checkpoint;
pub mod kernels;
mod model;
pub mod ops;
pub mod params;
mod receptive;
pub mod tensor;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use model::{ChannelGate, Network, SpatialGate};
pub use ops::{BnObservation, Eval, Ops, Tape, Var};
pub use params::{Gradients, ParamId, ParamStore};
pub use receptive::{network_path, path_receptive_field, receptive_field, Layer};
pub use tensor::{Real, Tensor};

/// The architecture variants compared during model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "DUnet")]
    DUnet,
    #[serde(rename = "DDUnet")]
    DDUnet,
    #[serde(rename = "DDAUnet-noChA2")]
    DDAUnetNoChA2,
    #[serde(rename = "DDAUnet-plusChA1-noChA2")]
    DDAUnetPlusChA1NoChA2,
    #[serde(rename = "DDAUnet-noSpA-plusChA1-noChA2")]
    DDAUnetNoSpAPlusChA1NoChA2,
    #[serde(rename = "DDAUnet")]
    DDAUnet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::DUnet,
        Variant::DDUnet,
        Variant::DDAUnetNoChA2,
        Variant::DDAUnetPlusChA1NoChA2,
        Variant::DDAUnetNoSpAPlusChA1NoChA2,
        Variant::DDAUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DUnet => "DUnet",
            Variant::DDUnet => "DDUnet",
            Variant::DDAUnetNoChA2 => "DDAUnet-noChA2",
            Variant::DDAUnetPlusChA1NoChA2 => "DDAUnet-plusChA1-noChA2",
            Variant::DDAUnetNoSpAPlusChA1NoChA2 => "DDAUnet-noSpA-plusChA1-noChA2",
            Variant::DDAUnet => "DDAUnet",
        }
    }

    /// `(dilation inside dense blocks, SpA, ChA1, ChA2)`.
    pub fn flags(self) -> (usize, bool, bool, bool) {
        match self {
            Variant::DUnet => (1, false, false, false),
            Variant::DDUnet => (2, false, false, false),
            Variant::DDAUnetNoChA2 => (2, true, false, false),
            Variant::DDAUnetPlusChA1NoChA2 => (2, true, true, false),
            Variant::DDAUnetNoSpAPlusChA1NoChA2 => (2, false, true, false),
            Variant::DDAUnet => (2, true, false, true),
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
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Resolution levels, including the bottom level.
    pub levels: usize,
    pub stem_channels: usize,
    /// Sub-blocks per dense block (R).
    pub sub_ddbs: usize,
    /// Channels emitted by each sub-block.
    pub growth: usize,
    /// Width of the 1x1x1 bottleneck in front of each dilated convolution.
    pub bottleneck: usize,
    /// Dense block compression coefficient in (0, 1].
    pub theta: f64,
    pub dilation_ddb: usize,
    pub use_spa: bool,
    pub use_cha1: bool,
    pub use_cha2: bool,
}

impl NetworkConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (dilation_ddb, use_spa, use_cha1, use_cha2) = variant.flags();
        NetworkConfig {
            variant,
            levels: 3,
            stem_channels: 16,
            sub_ddbs: 3,
            growth: 16,
            bottleneck: 8,
            theta: 0.5,
            dilation_ddb,
            use_spa,
            use_cha1,
            use_cha2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.variant.flags();
        let actual = (self.dilation_ddb, self.use_spa, self.use_cha1, self.use_cha2);
        if expected != actual {
            return Err(Error::Config(format!(
                "variant {} requires (dilation, SpA, ChA1, ChA2) = {expected:?}, got {actual:?}",
                self.variant
            )));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if self.levels < 2 {
            return Err(Error::Config("at least two levels are required".into()));
        }
        if self.stem_channels == 0 || self.growth == 0 || self.bottleneck == 0 || self.sub_ddbs == 0 {
            return Err(Error::Config("channel counts and R must be positive".into()));
        }
        Ok(())
    }

    /// Spatial dims of any input must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::for_variant(Variant::DDAUnet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("DDAUnet-plusChA2".parse::<Variant>().is_err());
    }

    #[test]
    fn final_network_has_spa_and_cha2_only() {
        let c = NetworkConfig::for_variant(Variant::DDAUnet);
        assert_eq!(
            (c.dilation_ddb, c.use_spa, c.use_cha1, c.use_cha2),
            (2, true, false, true)
        );
        let d = NetworkConfig::for_variant(Variant::DUnet);
        assert_eq!(
            (d.dilation_ddb, d.use_spa, d.use_cha1, d.use_cha2),
            (1, false, false, false)
        );
    }

    #[test]
    fn inconsistent_flags_are_rejected() {
        let c = NetworkConfig {
            use_cha1: true,
            ..NetworkConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = NetworkConfig {
            theta: 0.0,
            ..NetworkConfig::default()
        };
        assert!(c.validate().is_err());
        c.theta = 1.5;
        assert!(c.validate().is_err());
    }
}
