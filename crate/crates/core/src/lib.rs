//! Offline toolkit for sizing ad-retrieval models.
//!
//! The crate covers the whole offline loop: revenue-aligned evaluation of
//! ranked slates ([`metrics`]), the listwise surrogate losses used to train
//! retrieval models ([`arf`]), FLOPs accounting for MLP and twin-tower
//! models ([`flopscalc`]), broken power-law fitting of quality against
//! compute ([`bnsl`]), machine-count estimation by simulated serving
//! ([`costsim`]) and ROI-constrained design and budget allocation
//! ([`planner`]).

// `!(x > 0.0)` style checks are how NaN gets rejected alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arf;
pub mod bnsl;
pub mod costsim;
pub mod domain;
pub mod error;
pub mod flopscalc;
pub mod metrics;
pub mod numeric;
pub mod optim;
pub mod planner;

pub use error::{Error, ErrorKind, Result};
