//! Conformal prediction regions for multi-output regression.
//!
//! The central method trains a conditional normalizing flow on a proper
//! training set, maps calibration pairs to the flow's latent space, and takes
//! an order statistic of their latent norms as the radius of a latent ball.
//! The prediction region at a new input is the image of that ball under the
//! flow: a closed, connected set with finite-sample marginal coverage.
//!
//! Alongside it live the residual variant (a flow fitted to the residuals of
//! any point predictor), a multi-output conformalized quantile box method,
//! and two baselines (union-of-balls over generative samples and a
//! global-covariance ellipsoid), plus the repeated-split evaluation harness.

pub mod baselines;
pub mod conformal;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod flow;
pub mod geometry;
pub mod mcqr;
pub mod nn;
pub mod rescontra;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
