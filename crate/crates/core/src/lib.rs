//! Guided stop-gradient (GSG) for SimSiam- and BYOL-style Siamese networks,
//! at a scale that fits on a desk.
//!
//! The crate is split the same way a training run flows:
//!
//! - [`autodiff`]: a small reverse-mode engine over dense `f64` matrices with an
//!   explicit stop-gradient (`detach`).
//! - [`nn`]: backbone/projector/predictor MLPs, the momentum target copy and
//!   checkpoints.
//! - [`objective`]: negative cosine similarity, the cross-pair distances and the
//!   symmetric, guided, random and reverse loss selections.
//! - [`data`]: synthetic Gaussian clusters, vector augmentations and shuffled pairing.
//! - [`train`]: SGD with momentum, learning-rate schedules and the training loop.
//! - [`eval`]: kNN, linear probe and the collapse statistic.
//! - [`gradcheck`]: finite-difference checks used by the test suites.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod matrix;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod train;

pub use autodiff::{AutodiffError, Graph, Tensor};
pub use matrix::Matrix;
