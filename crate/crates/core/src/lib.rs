//! Ripple sparse self-attention and the masking-based speech enhancement
//! transformer built around it.
//!
//! * [`dsp`]: STFT analysis/synthesis, SNR mixing, WAV I/O
//! * [`targets`]: IRM / PSM training targets and mask application
//! * [`pattern`]: attention mask patterns and their nonzero counts
//! * [`kernel`]: dense (reference) and sparse masked multi-head attention
//! * [`model`]: the enhancement network, its gradients and checkpoints
//! * [`train`]: warm-up schedule, Adam, clipping, synthetic data, training loop
//! * [`analysis`]: theoretical MAC counts and kernel benchmarks

pub mod analysis;
pub mod dsp;
pub mod error;
pub mod kernel;
pub mod model;
pub mod pattern;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
