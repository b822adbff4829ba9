//! Matching on minimal-sufficient balancing scores for simultaneous
//! estimation of all pairwise treatment effects among several arms.
//!
//! The pipeline is: load a [`dataset::Dataset`], compute a log likelihood-ratio
//! score vector per unit ([`scores`], [`ratio_estim`]), match every anchor unit
//! to its nearest-score units in each other arm ([`matching`]), and average
//! within-group response differences ([`effects`]). [`simulation`] generates
//! data with known ground truth to check the whole chain.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod effects;
pub mod error;
pub mod io;
pub mod matching;
pub mod ratio_estim;
pub mod scores;
pub mod simulation;

pub use error::{Error, Result};
