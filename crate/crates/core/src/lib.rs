//! Identification of shared low-dimensional linear dynamics from time series
//! recorded through multiple, partially overlapping observation sessions.
//!
//! * [`model`]: the latent LDS, predicted lagged covariances, simulation.
//! * [`observation`]: serial subset observation schemes, co-occurrence
//!   groups and counts, empirical lagged covariances.
//! * [`s3id`]: moment matching by stochastic gradients (linear and
//!   dynamics-agnostic latent variants) and Hankel-SVD identification.
//! * [`sem`]: EM with subset-indexed Kalman filtering and smoothing.
//! * [`eval`]: subspace metrics, prediction correlation, spectra and the
//!   factor-analysis + post-hoc alignment baseline.
//! * [`io`]: on-disk datasets and parameter files.

pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod model;
pub mod observation;
pub mod rng;
pub mod s3id;
pub mod sem;

pub use error::{Error, Result};
