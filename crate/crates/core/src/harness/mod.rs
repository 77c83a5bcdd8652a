//! Training harness: models, datasets, run configuration, the training loop,
//! checkpoints and evaluation.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod train;
