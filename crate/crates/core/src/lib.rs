//! Variance-reduced score-function gradient estimators for factorized
//! binary distributions.
//!
//! Control variates are built by applying discrete Stein operators (Gibbs,
//! minimum probability flow, birth-death, difference) to learned surrogate
//! functions, whose parameters are adapted online by descending the trace
//! variance of the estimator. Every identity the estimators rely on is
//! checked against exhaustive enumeration in [`oracle`].
//!
//! Module map:
//!
//! - [`nn`]: dense feed-forward nets with exact reverse-mode gradients, Adam.
//! - [`distributions`]: the factorized Bernoulli `q_η` and indexed finite
//!   distributions.
//! - [`stein`]: the operator family behind the [`stein::SteinOperator`] trait
//!   and its name registry.
//! - [`surrogates`]: the two-output control-variate network and the
//!   leave-one-out / pooled surrogate constructions.
//! - [`estimators`]: REINFORCE, RLOO, REINFORCE + Stein CV, RODEO behind the
//!   [`estimators::GradientEstimator`] trait, plus the variance gradient.
//! - [`tasks`]: quadratic and toy-VAE objectives and the training loop.
//! - [`oracle`]: enumeration oracles and the `check` suites.
//! - [`runner`]: run configuration, trace/summary files and `compare`.

pub mod distributions;
pub mod error;
pub mod estimators;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod runner;
pub mod stein;
pub mod surrogates;
pub mod tasks;

pub use error::{Error, Result};
