//! Decoder building blocks and the decoder assembly.

pub mod cab;
pub mod config;
pub mod decoder;
pub mod eucb;
pub mod head;
pub mod lgag;
pub mod mscam;
pub mod mscb;
pub mod sab;

pub use cab::Cab;
pub use config::{DecoderConfig, SegOutputs, StageFeatures};
pub use decoder::{pyramid_shapes, Decoder, DecoderStage};
pub use eucb::Eucb;
pub use head::SegHead;
pub use lgag::Lgag;
pub use mscam::Mscam;
pub use mscb::{channel_shuffle, channel_unshuffle, Mscb};
pub use sab::Sab;
