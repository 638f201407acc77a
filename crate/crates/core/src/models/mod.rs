//! ResNet generator and discriminator for 32×32 and 128×128 images.

pub mod attention;
pub mod audit;
pub mod blocks;
pub mod discriminator;
pub mod generator;

pub use crate::nn::spectral::spectral_normalize;
pub use attention::SpatialAttention;
pub use audit::{audit_discriminator, audit_generator, count_flops, count_parameters, FlopConvention, LayerRow, ModelAudit};
pub use blocks::{DiscBlock, GenBlock, NormSite};
pub use discriminator::{build_discriminator, Discriminator, DiscriminatorSpec};
pub use generator::{build_generator, GenOutput, Generator, GeneratorSpec};

use crate::error::{Error, Result};
use crate::spn::{AffineConv, KernelMode, MaskChannels};

/// Normalization used inside the generator's residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormChoice {
    Bn,
    /// Class-conditional BN.
    Cbn,
    /// Class-conditional BN with a latent bias.
    Ccbn,
    Spn,
    Cspn,
}

impl NormChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(Self::Bn),
            "cbn" => Ok(Self::Cbn),
            "ccbn" => Ok(Self::Ccbn),
            "spn" => Ok(Self::Spn),
            "cspn" => Ok(Self::Cspn),
            _ => Err(Error::Invalid(format!("unknown norm kind `{s}` (bn, cbn, ccbn, spn, cspn)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bn => "bn",
            Self::Cbn => "cbn",
            Self::Ccbn => "ccbn",
            Self::Spn => "spn",
            Self::Cspn => "cspn",
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(self, Self::Cbn | Self::Ccbn | Self::Cspn)
    }

    pub fn is_spn(self) -> bool {
        matches!(self, Self::Spn | Self::Cspn)
    }
}

/// Knobs of the SPN sites, shared by every starred block.
#[derive(Clone, Debug, PartialEq)]
pub struct SpnOptions {
    pub kernel_size: usize,
    pub mask_channels: MaskChannels,
    pub affine_conv: AffineConv,
    pub latent_bias: bool,
    pub kernel_mode: KernelMode,
    pub embed_dim: usize,
}

impl Default for SpnOptions {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            mask_channels: MaskChannels::PerChannel,
            affine_conv: AffineConv::Depthwise,
            latent_bias: true,
            kernel_mode: KernelMode::Modulated,
            embed_dim: 128,
        }
    }
}
