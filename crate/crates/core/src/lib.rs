//! Episodic few-shot video recognition on a frozen transformer backbone
//! tuned through lightweight adapters, with text-guided prototypes and
//! pluggable temporal alignment metrics.

// negated float comparisons double as NaN guards
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod data;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tpcm;
pub mod train;

pub use error::{Error, Result};
