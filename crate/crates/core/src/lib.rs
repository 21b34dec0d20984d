//! Convolutional phoneme recognition from raw waveforms: framing, a
//! convolutional network with exact gradients, per-frame training, CRF and
//! duration-constrained decoding, and evaluation.

pub mod crf;
pub mod data;
pub mod error;
pub mod eval;
pub mod frame;
pub mod gradcheck;
pub mod hmmdec;
pub mod model;
pub mod nn;
pub mod real;
pub mod seed;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
pub use frame::FrameMatrix;
pub use real::Real;
