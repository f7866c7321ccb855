//! Heart-murmur detection from phonocardiogram recordings.
//!
//! The pipeline runs recording → 3 s segments → log-Mel feature maps →
//! a two-branch (self-attention ∥ convolutional gating) encoder →
//! Monte-Carlo-dropout class probabilities → temperature scaling →
//! record and patient decisions, scored by weighted accuracy, macro-F1
//! and expected calibration error.

pub mod aggregation;
pub mod calibration;
pub mod config;
pub mod dataio;
mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod training;
pub mod uncertainty;

pub use dataio::ClassLabel;
pub use error::{Error, Result};

/// Sample rate every recording must have.
pub const SAMPLE_RATE: u32 = 4000;
/// Number of murmur classes (absent, present, unknown).
pub const N_CLASSES: usize = 3;
