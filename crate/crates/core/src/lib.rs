//! Multi-modal transformer for earthquake-induced liquefaction prediction.
//!
//! Three input streams feed the network: the normalized magnitude spectrum
//! of the ground motion, a ten-layer soil profile (SPT blow count and soil
//! type per metre), and four site scalars. The two sequence streams are
//! encoded by attention blocks, fused, and classified by a small MLP.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the default double-precision instantiation.

pub mod data;
pub mod error;
pub mod explain;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = nn::Tensor<f64>;
pub type ParamStore = nn::ParamStore<f64>;
pub type Spectrum = signal::Spectrum<f64>;
pub type MotionRecord = signal::MotionRecord<f64>;
