//! Learning stochastic ranking policies from position-biased, noisy click logs
//! under merit-based fairness-of-exposure constraints.
//!
//! The crate is organised along the experiment pipeline:
//!
//! - [`dataset`]: LETOR ingestion, relevance binarization, group assignment,
//!   query construction and a synthetic generator.
//! - [`clicksim`]: logging policy, position-based click simulation and the
//!   planted-item intervention for estimating false-positive click noise.
//! - [`estimators`]: utility, merit, exposure and disparity quantities, both
//!   true (full information) and estimated from click logs.
//! - [`policy`]: Plackett-Luce ranking policies over linear and one-hidden-layer
//!   scorers, with analytic gradients.
//! - [`trainer`]: policy-gradient training of the penalised objective and the
//!   sweep over penalty weights.
//! - [`eval`]: full-information evaluation and trade-off frontiers.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clicksim;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod policy;
pub mod ranking;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use ranking::Ranking;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
