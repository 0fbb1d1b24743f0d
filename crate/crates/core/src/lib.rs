//! Channel normalization for multivariate time-series forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] dense tensors and the handful of kernels everything else uses.
//! * [`normlayers`] LN, IN, CN, ACN and PCN with hand-derived backward passes.
//! * [`backbones`] channel-as-token forecasting models built around those layers.
//! * [`datasets`] synthetic generators, CSV ingestion, splits and windows.
//! * [`training`] losses, Adam, the training loop and a finite-difference checker.
//! * [`diagnostics`] identifiability predicate, Gaussian entropies, correlation and
//!   attention-head divergence.
//! * [`config`], [`checkpoint`] and [`experiment`] tie the pieces into runnable
//!   experiments for the command-line front end.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod diagnostics;
mod error;
pub mod experiment;
pub mod normlayers;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{RngState, Tensor};
