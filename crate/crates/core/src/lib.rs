//! Video semantic segmentation with a peephole ConvLSTM temporal encoder
//! and noise-injected context frames.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]) over dense tensors, the recurrent cell ([`convlstm`]),
//! the segmentation network ([`segnet`]), the frame-replacement policy
//! ([`noise`]), a synthetic labeled-video generator ([`data`]), training
//! ([`trainer`]) and mIoU evaluation ([`metrics`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod grad_suites;
pub mod gradcheck;
pub mod metrics;
pub mod noise;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Fault, Mode, Pointwise, Resize, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamList, Parameterized};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
