//! Label-noise laboratory: synthetic data, noise models, noise-robust losses,
//! sample re-weighting, multi-annotator fusion and training procedures on
//! small hand-differentiated classifiers.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotators;
pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod par;
pub mod procedures;
pub mod reweight;

pub use error::{Error, Result};
