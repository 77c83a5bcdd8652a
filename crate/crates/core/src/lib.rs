//! Quantization-aware training with learnable per-layer precision.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f32` tensors and a reverse-mode tape
//!   covering what small MLPs and residual CNNs need.
//! - [`quantizer`]: learnable-step fake quantization and stochastic gradient
//!   rounding.
//! - [`cost`]: BitOPs accounting, the hinged cost objective and the
//!   task/cost gradient balancing rule for precision parameters.
//! - [`schedule`]: learned and fixed precision schedules with log/replay.
//! - [`harness`]: models, datasets, the training loop, checkpoints.

pub mod autodiff;
pub mod cost;
pub mod error;
pub mod harness;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod schedule;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
