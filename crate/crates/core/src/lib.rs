//! Mixture-of-experts classifier for transcription-factor binding sites.
//!
//! The crate is organised bottom-up:
//!
//! * [`seqdata`] one-hot encoding, circular shifts, dataset IO, synthetic
//!   motif corpora and bootstrap resampling.
//! * [`nn`] dense/conv layer primitives with hand-written backward passes.
//! * [`expert`] a single convolutional binding-score model.
//! * [`moe`] the N:1 mixture that gates frozen experts.
//! * [`trainer`] Nesterov SGD, early stopping and random hyperparameter search.
//! * [`stats`] ROC/AUC, paired bootstrap evaluation and one-way ANOVA.
//! * [`attribution`] Vanilla Gradient, Saliency and ShiftSmooth maps.
//! * [`cli`] the `tfbs-moe` command-line driver.

pub mod attribution;
pub mod cli;
pub mod error;
pub mod expert;
pub mod model;
pub mod moe;
pub mod nn;
pub mod seqdata;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};

/// Version string recorded in manifests and model documents.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Lowercase hex SHA-256 of `bytes`, used for artifact content hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
