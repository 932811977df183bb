//! Differentiable primitives with explicit backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod gradcheck;
pub mod module;
pub mod pool;
pub mod upsample;

pub use activation::{activation_backward, activation_forward, sigmoid, Activation, ActivationLayer};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNorm2d, BatchNormState};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvParams, ConvSpec};
pub use gradcheck::{gradcheck, gradcheck_layer, Differentiable, GradCheckOptions, GradCheckReport};
pub use module::{for_each_param, param_count, set_mode, zero_grads, Layer, Mode, Module, Param, Visitor};
pub use pool::{pool_global, pool_global_backward, PoolKind};
pub use upsample::{upsample_bilinear, upsample_bilinear_backward, upsample_nearest2x, upsample_nearest2x_backward};
