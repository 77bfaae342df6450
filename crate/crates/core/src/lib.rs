//! Frequentist and Bayesian neural networks for remaining-useful-life (RUL)
//! regression on C-MAPSS-style turbofan data.
//!
//! Three trainers share one model zoo and one Huber likelihood:
//!
//! - [`trainers::train_backprop`]: point estimate with dropout,
//! - [`trainers::train_bbb`]: Bayes by Backprop over a factorised Gaussian,
//! - [`trainers::train_svgd`]: Stein variational gradient descent over a particle set.
//!
//! [`predict`] turns any of them into a posterior-predictive summary and applies
//! the late-prediction correction, [`metrics`] scores the result and [`cli`]
//! drives whole multi-seed experiments.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod predict;
pub mod rng;
pub mod trainers;

pub use error::{Error, Result};
