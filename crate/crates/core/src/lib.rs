//! Homogenization-based dimensional reduction for nonlinear filtering of
//! slow/fast stochastic systems.
//!
//! The crate simulates a two-timescale signal with noisy observations, builds
//! the averaged slow model from the invariant law of the frozen fast process,
//! and runs weighted particle filters for both the full and the reduced model
//! on the same observation path. The [`study`] module sweeps the scale
//! parameter and fits the log-log rate of the distance between the two
//! filters.

pub mod averaging;
pub mod catalog;
pub mod cli;
pub mod error;
pub mod filtering;
pub mod measures;
pub mod model;
pub mod rng;
pub mod study;
pub mod table;

pub use error::{Error, Result};
