//! Stochastic and fluid analysis of small reaction networks.
// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod crn;
pub mod error;
pub mod fluid;
pub mod lab;
pub mod lyapunov;
pub mod scaling;
pub mod ssa;
pub mod stats;

pub use crn::{builtin_network, parse_network, Concentration, Network, Reaction, State};
pub use error::{Error, Result};
