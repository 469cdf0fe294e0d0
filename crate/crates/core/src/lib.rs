//! Conditional injective normalizing flows for amortized Bayesian inference
//! in small inverse problems.

pub mod diffcore;
mod error;
pub mod io;
pub mod flow;
pub mod model;
pub mod metrics;
pub mod problems;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
