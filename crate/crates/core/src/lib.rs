//! Particle filters for nonlinear state-space models, including a filter that
//! migrates particles through a support-vector density estimate.

pub mod checks;
pub mod error;
pub mod filters;
pub mod harness;
pub mod kalman;
pub mod metrics;
pub mod model;
pub mod region;
pub mod resampling;
pub mod rng;
pub mod svr_density;

pub use error::{FilterError, Result};
