//! Instance-conditioned low-rank residual assembly for image restoration.
//!
//! The crate is organized around a minimal f64 autograd engine ([`tensor`]),
//! the token-wise residual assembly mechanism ([`assembly`]), the
//! cross-attention factor generator ([`adapter`]), a toy U-shaped Transformer
//! restorer ([`backbone`]), training objectives and evaluation statistics
//! ([`metrics`]), synthetic degradation operators ([`degrade`]), and the
//! experiment harness behind the `cea-kit` binary ([`harness`]).
//!
//! See the crate's `examples/` directory for one runnable example per major
//! capability.

pub mod adapter;
pub mod assembly;
pub mod backbone;
pub mod degrade;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod tensor;

pub use error::{CeaError, Result};
pub use tensor::Tensor;
