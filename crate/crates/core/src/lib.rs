//! Sleep-state scoring from wide-field calcium imaging.
//!
//! A CNN-BiLSTM network with additive attention classifies fixed-length
//! epochs of preprocessed fluorescence frames as Wake, NREM or REM. The crate
//! covers the whole workflow: synthetic data, preprocessing, epoching,
//! training, evaluation and interpretation, with a small reverse-mode
//! differentiation engine underneath.

pub mod cli;
pub mod compute;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod model;
pub mod preprocess;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
