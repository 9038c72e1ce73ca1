//! Segmentation lab for false-negative-aware attention U-Nets.
//!
//! The crate carries its own small tensor engine with reverse-mode autodiff
//! ([`autograd`]), the convolution blocks and parameter store built on it
//! ([`layers`]), the attention encoder blocks and U-Net variants ([`model`]),
//! an effective-receptive-field analyzer ([`erf`]), evaluation metrics
//! ([`metrics`]) and the training harness ([`train`]).

pub mod autograd;
pub mod erf;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use autograd::{ConvSpec, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
