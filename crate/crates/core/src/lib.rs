//! Attention modular networks for multivariate time series.
//!
//! The model chains a recurrent encoder, an attention-based feature selector
//! and an additive ensemble of one small network per selected input feature.
//! Predictions decompose exactly into per-feature contributions plus a bias,
//! which is what the [`explain`] module plots.

pub mod afs;
pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod modular;
pub mod params;
pub mod rng;
pub mod train;

pub use error::{AmnError, Result};
