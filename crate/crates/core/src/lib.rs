//! Quantization-aware training for compact convolutional networks.
//!
//! * [`tensor`]: a deterministic reverse-mode autodiff engine with the layers
//!   and optimizers needed to train small depthwise-separable networks.
//! * [`quant`]: DuQ learnable quantizers (asymmetric, symmetric and
//!   non-negative) and the PACT baseline.
//! * [`aiwq`]: the per-layer activation-instability metric.
//! * [`profit`]: progressive freezing and progressive bit-width schedules.
//! * [`negpad`]: shifted-activation convolution with negative padding.
//! * [`harness`]: configs, datasets, the toy model zoo, training pipelines,
//!   checkpoints and cost reports.

pub mod aiwq;
pub mod error;
pub mod harness;
pub mod negpad;
pub mod profit;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use quant::{PactParams, QuantMode, QuantParams};
pub use tensor::kernels::{Activation, ConvSpec};
pub use tensor::tape::{Tape, Var};
pub use tensor::Tensor;
