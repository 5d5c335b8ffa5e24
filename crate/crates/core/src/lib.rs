//! Quantile-based regression for grouped event-timing data.
//!
//! The crate fits and compares four families of models on per-observation
//! arrival days: linear models on empirical cell quantiles ([`eq`]),
//! nonparametric linear quantile regression ([`qr`]), asymmetric-Laplace
//! likelihood quantile models ([`lqm`]), and their mixed-effects extensions
//! ([`meq`], [`lqmm`]). Random effects of the quantile mixed model are
//! predicted with a block-structured covariance inverse ([`ranef`]), pairs
//! bootstrap intervals come from [`bootstrap`], and [`simgen`] produces
//! synthetic multi-group data with known quantile lines.

pub mod bootstrap;
pub mod cli;
pub mod dataset;
pub mod distributions;
pub mod eq;
mod error;
pub mod linalg;
pub mod lqm;
pub mod lqmm;
pub mod meq;
pub mod optim;
pub mod qr;
pub mod ranef;
pub mod simgen;

pub use error::{Error, Result};
