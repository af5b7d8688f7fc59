//! Particle-based Monte Carlo simulation of diffusive molecular
//! communication through a reflecting plane with a circular aperture.

pub mod channel;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod link;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod sweep;
pub mod walker;

pub use error::{Error, Result};
