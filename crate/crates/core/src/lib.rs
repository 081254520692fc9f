//! Quantized multi-exit CNN inference for energy-harvested devices:
//! an affine quantizer with Q8/Q4 observers, a multi-exit network engine,
//! confidence-based early exits, an energy-aware scheduler that picks
//! precision from the harvested charging rate, a discrete-time harvesting
//! simulator, a DSP-calibrated cost model, and toy-scale QAT.

pub mod container;
pub mod costmodel;
pub mod eats;
pub mod error;
pub mod exitpolicy;
pub mod harvestsim;
pub mod netgraph;
pub mod quantizer;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;
