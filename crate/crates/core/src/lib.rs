pub mod baselines;
pub mod burnin;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod linkfn;
pub mod theory;

pub use error::{Error, Result};

#[cfg(test)]
mod properties;
