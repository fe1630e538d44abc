//! Sequential Bayesian design of parallel-beam X-ray projections.
//!
//! The crate selects, one projection at a time, the beam angle and lateral
//! offset that minimize an A- or D-optimality target under a Gaussian prior
//! and Gaussian noise, with support for changing the region of interest
//! between projections and for re-estimating the prior correlation length
//! from the measured data.

pub mod archive;
pub mod config;
pub mod design;
pub mod error;
pub mod gauss;
pub mod likelihood;
pub mod simulation;
pub mod geometry;
pub mod io;
pub mod targets;

pub use error::{Error, Result};
