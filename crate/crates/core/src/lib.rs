//! Maximum-likelihood identification of networks of ARMAX systems observed
//! through a subset of their node signals.
//!
//! The crate provides
//! - network models, closed-loop realizations and transfer-function evaluation ([`model`], [`closed_loop`]);
//! - Riccati and Kalman machinery ([`riccati`], [`kalman`]);
//! - predictor-based likelihoods and a predictor-free Toeplitz likelihood ([`likelihood`], [`toeplitz`]);
//! - a staged trust-region estimator ([`estimator`], [`optim`]);
//! - data generation, metrics and Monte Carlo studies ([`experiments`]).

pub mod closed_loop;
pub mod data;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod kalman;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod poly;
pub mod riccati;
pub mod toeplitz;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
