//! Numerical core for the Hartree model of path-repellent Brownian motions.

pub mod error;
pub mod feynman_kac;
pub mod grid;
pub mod hamiltonians;
pub mod montecarlo;
pub mod paths;
pub mod potentials;
pub mod rate_function;
pub mod variational;

pub use error::{Error, Result};
