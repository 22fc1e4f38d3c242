//! Toy-scale low-light image enhancement built on a vector-quantized
//! codebook prior, Gram-matrix light factors, and light-aware prompts.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod light_quant;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dims, Tensor4};
