//! Video polyp segmentation with causal multi-scale attention and dynamic
//! reference selection, at desk scale.

pub mod check;
pub mod checkpoint;
pub mod clip;
pub mod cma;
pub mod config;
pub mod decoder;
pub mod dmr;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracles;
pub mod params;
pub mod rng;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
