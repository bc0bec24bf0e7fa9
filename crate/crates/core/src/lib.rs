//! Bayesian low-rank matrix factorization with cumulative spike-and-slab
//! shrinkage on the singular values.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod error;
pub mod experiments;
pub mod model;
pub mod posterior;
pub mod priors;
pub mod samplers;

pub use error::{Error, Result};
pub use model::{Factorization, ObservedMatrix};
pub use priors::PriorSpec;
