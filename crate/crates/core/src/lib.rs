//! Adaptive context pooling for attention models and ConvNets.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape over
//!   a closed op set, plus [`gradcheck`] for finite-difference checks.
//! - [`params`]: named parameter storage and deterministic initialisation.
//! - [`contextpool`]: per-token pooling weights and Gaussian support sizes,
//!   1D and 2D pooling, and the ablation variants.
//! - [`transformer`] and [`convnet`]: backbones with ContextPool inserted.

pub mod autodiff;
pub mod contextpool;
pub mod convnet;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
