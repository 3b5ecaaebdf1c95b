//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every kernel is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! single precision; finite-difference gradient checks run in double.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use error::{Result, TensorError};
pub use gradcheck::{GradCheck, GradReport};
pub use ops::{Conv2dOpts, PoolMode, SampleGrid};
pub use params::{Adam, ParameterStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParameterStore32 = ParameterStore<f32>;
pub type ParameterStore64 = ParameterStore<f64>;
