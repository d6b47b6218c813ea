//! Gated linear attention with refined forget gates, its baselines, and the
//! numerical tooling around them (variance measurements, gradient checks).
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Matrices hold one
//! sequence position per column.

pub mod attention;
pub mod error;
pub mod feature_maps;
pub mod gradients;
pub mod params;
pub mod rng;
mod scalar;
pub mod variance_lab;

pub use attention::{
    AttentionBlock, AttentionConfig, BlockDecoder, ForwardMode, GateKind, GateParams, RecurrentState, ScalingKind,
};
pub use error::{Error, Result};
pub use feature_maps::{FeatureMapKind, FeatureParams, KeyMaxMode, StreamingMaxState};
pub use params::Params;
pub use scalar::Scalar;

pub type AttentionBlockF32 = AttentionBlock<f32>;
pub type AttentionBlockF64 = AttentionBlock<f64>;
pub type RecurrentStateF32 = RecurrentState<f32>;
pub type RecurrentStateF64 = RecurrentState<f64>;
