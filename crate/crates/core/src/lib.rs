//! Graph hypernetwork parameter prediction with simulated-quantization robustness evaluation.

pub mod arch;
pub mod cli;
pub mod error;
pub mod fsio;
pub mod hypernet;
pub mod params;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::PredictedParams;
