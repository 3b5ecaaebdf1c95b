//! Forward and backward kernels. The tape in `crate::tape` records which of
//! these produced each value; the kernels themselves are plain functions on
//! tensors and are usable without autodiff.

pub mod conv;
pub mod norm;
pub mod reduce;
pub mod resize;
pub mod sample;

pub use conv::{conv2d, Conv2dOpts};
pub use norm::group_norm;
pub use reduce::{log_softmax_depth, pool_depth, softmax_depth, PoolMode};
pub use resize::bilinear_resize;
pub use sample::{bilinear_sample, SampleGrid};
