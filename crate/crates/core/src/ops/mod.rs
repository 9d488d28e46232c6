//! Raw forward/backward kernels behind the differentiable operations.
//!
//! These work on tensors directly and know nothing about the tape; the
//! [`autodiff`](crate::autodiff) module wires them together.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod resample;

pub use conv::{conv2d, conv2d_reference, ConvGeometry};
pub use loss::IGNORE_INDEX;
pub use norm::{BatchNormStats, BN_EPSILON, BN_MOMENTUM};
