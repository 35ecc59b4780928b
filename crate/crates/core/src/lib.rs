//! Video deblurring with windowed Transformers.
//!
//! A clip of `2N+1` blurry frames is embedded patch-wise, each frame passes a
//! shared windowed-attention encoder-decoder ([`spatial`]), the per-frame
//! features are fused by spatio-temporal window attention ([`temporal`]), and
//! the fused map is decoded back to an RGB residual added to the central
//! frame ([`reconstruction`]). Everything runs on the f64 reverse-mode
//! engine in [`tensor`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod reconstruction;
pub mod spatial;
pub mod temporal;
pub mod tensor;
pub mod tensor_io;
#[cfg(test)]
mod testutil;
pub mod train;
pub mod window;

pub use error::{Error, Result};
pub use param::{Init, Module, Parameter};
pub use tensor::Tensor;
