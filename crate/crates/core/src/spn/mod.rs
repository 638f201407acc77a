//! Self pixel-wise normalization and its class-conditional variant.

pub mod functional;
pub mod gradcheck;
pub mod layer;
pub mod types;

pub use functional::{
    build_self_latent_mask, channelwise_normalize, cspn_forward, estimate_affine_field, invert_mask, layer_backward,
    spn_forward, Conditioning, SpnGrads,
};
pub use layer::{SpnLayer, SpnTrace};
pub use types::{
    AffineConv, AffineField, ClassCondition, ConditionalConfig, ConditionalParams, FeatureMap, KernelMode,
    MaskChannels, SelfLatentMask, SpnConfig, SpnParams, SpnState,
};
