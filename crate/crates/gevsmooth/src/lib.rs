//! Spatially smooth generalized extreme value (GEV) modelling of gridded
//! annual-maximum data.
//!
//! The crate fits GEV distributions whose parameters vary smoothly over a
//! regular lattice of grid boxes, with covariate-driven trends in the
//! location and log-scale parameters. Smoothness is imposed through a
//! Gaussian Markov random field roughness penalty, with smoothing parameters
//! selected by Laplace-approximate marginal likelihood. On top of the fitter
//! sit return-level and risk-ratio inference with Monte Carlo credible
//! intervals, proper scoring rules with k-fold cross-validation, a
//! sign-flip randomization test for score exchangeability, and
//! distributional diagnostics.

pub mod diagnostics;
pub mod error;
pub mod fit;
pub mod gev;
pub mod grid;
pub mod inference;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod synthetic;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
