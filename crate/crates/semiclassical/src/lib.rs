//! Semiclassical solver for multi-asset stochastic portfolio construction.

pub mod error;
pub mod flowmap;
pub mod hamiltonian;
pub mod leapfrog;
pub mod model;
pub mod oracle;
pub mod utility;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
