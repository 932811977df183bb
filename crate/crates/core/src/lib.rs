//! Multi-scale convolutional attention decoder for medical image
//! segmentation, with the tensor, layer, loss, optimizer, data and metric
//! machinery needed to train and evaluate it on CPU.

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Prng;
pub use tensor::{DType, Scalar, Shape, Tensor4};
