//! Minimal differentiable substrate: tensors, the fixed layer set, explicit
//! backward passes, gradient checking and Adam.

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod embedding;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod pool;
pub mod tensor;

pub use activation::Activation;
pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{kaiming_uniform, ParamStore};
pub use tensor::{lit, Real, Tensor};
