//! Bit-exact simulator and mapping compiler for RRAM-crossbar BNN
//! accelerators: XNOR-popcount inference with folded integer thresholds,
//! input-splitting network reconstruction so every array emits 1-bit outputs,
//! partial-sum quantization baselines (linear and Lloyd-Max), a desk-scale
//! trainer/retrainer, and a flash-ADC power model.

pub mod bn;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model_io;
pub mod network;
pub mod power;
pub mod quantizer;
pub mod reconstruct;
pub mod tensor;
pub mod train;
pub mod xbar;

pub use error::{Error, Result};
