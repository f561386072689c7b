//! Simulation of statistical-matching attacks on anonymized and obfuscated
//! user traces when users are correlated, and of the pairwise decorrelating
//! countermeasure.
//!
//! The pipeline is: sample a [`population::Population`], generate true
//! traces ([`tracegen`]), apply [`mechanisms`], then run the
//! [`adversary`]. [`oracle`] holds exact brute-force computations on tiny
//! instances and [`experiments`] drives Monte Carlo sweeps.

pub mod adversary;
pub mod assignment;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod mechanisms;
pub mod oracle;
pub mod population;
pub mod seed;
pub mod tracegen;

pub use error::{Error, Result};
