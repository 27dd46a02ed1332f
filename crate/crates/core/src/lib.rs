//! Rao-Blackwellised reparameterisation gradients (R2-G2) for Gaussian
//! linear sites, together with RT, LRT and score-function baselines, a small
//! hand-differentiated Bayesian MLP, and the statistical harness used to
//! check the estimators against analytic oracles.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod estimators;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod nets;

pub use error::{Error, ErrorCategory, Result};
pub use estimators::{
    EstimatorKind, GradientEstimate, LinearMapContext, LrtSite, StochasticLayerTrace,
    UpstreamGradient,
};
pub use gaussian::{DiagGaussianParams, RngStream};
pub use linalg::{CgConfig, DenseMatrix, DenseVector, LinalgError};
pub use nets::Network;
