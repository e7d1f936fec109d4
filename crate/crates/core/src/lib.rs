//! Unsupervised domain-adaptive document binarization.
//!
//! A selectional auto-encoder (SAE) maps page patches to per-pixel
//! foreground probabilities. Bin-DANN adds a gradient-reversal domain
//! branch trained on unlabeled target pages. [`similarity::run_autobindann`]
//! compares the SAE's probability histograms on source and target pages and
//! only trains the adapted model when the correlation falls at or below a
//! threshold.

pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod similarity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
