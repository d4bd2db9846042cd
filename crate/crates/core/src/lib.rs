//! Mean-variance portfolio selection when the factors driving expected
//! returns are hidden and must be filtered from prices.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod filterbank;
pub mod hjbsolve;
pub mod model;
pub mod policy;
pub mod simkit;
mod ode;

pub use error::{Error, Result};
