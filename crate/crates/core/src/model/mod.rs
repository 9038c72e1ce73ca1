//! Attention encoder blocks and the U-Net family built from them.

pub mod attention;
pub mod spec;
pub mod unet;

pub use attention::{AttentionOutput, FpaBlock, RfnaBlock};
pub use spec::{FpaConfig, NetworkSpec, RfnaConfig, Variant};
pub use unet::{build_unet, init_params, ForwardOutput, Network, StageTrace};
