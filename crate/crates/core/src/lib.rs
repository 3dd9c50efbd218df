//! Dynamic structural equation models of human trust in AI.
//!
//! The crate covers the full pipeline: path diagrams ([`pathmodel`]),
//! state-space estimation by EM ([`estimation`]), lag-structure search
//! ([`structsearch`]), autoregressive baselines ([`baselines`]), synthetic
//! cohorts ([`cohortsim`]) and evaluation reports ([`evalreport`]).

// Range checks are written `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cohortsim;
pub mod error;
pub mod estimation;
pub mod evalreport;
pub mod pathmodel;
pub mod structsearch;

pub use error::{Error, Result};
