//! Spatially adaptive mixed-precision quantization for message-passing
//! PDE surrogates.
//!
//! A small auxiliary network predicts where the main network's loss is
//! high; those nodes and edges get more activation bits, the rest fewer,
//! under a fixed budget of bit-width ratios.

pub mod assign;
pub mod aux;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod darcy;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gemm;
pub mod graph;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{AmqError, Result};
