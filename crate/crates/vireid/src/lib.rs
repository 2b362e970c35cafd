//! Visible-infrared person re-identification at desk scale.
//!
//! The crate trains a dual-stream visual encoder against learnable text
//! semantics in three stages — bimodal prompt learning, attention fusion of
//! the two text-feature banks, and semantic-guided visual training — and
//! evaluates cross-modality retrieval with the standard CMC/mAP protocols.
//!
//! Start with the runnable programs in `examples/`; each one demonstrates a
//! single capability (dataset synthesis, PK batch sampling, the attention
//! fusion block, staged training, evaluation, λ sweeps). The `vireid` binary
//! wires the same library into `generate-data` / `train` / `evaluate` /
//! `sweep` subcommands driven by a TOML config.

pub mod autodiff;
pub mod dataset;
pub mod encoders;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod checkpoint;
pub mod evaluation;
pub mod trainer;
pub mod config;
pub mod plot;
pub mod cli;
pub mod error;

pub use error::{Error, Result};
