//! Probability-density geodesics and geodesic flow matching on analytic densities.

pub mod csv;
pub mod density;
pub mod diffcore;
pub mod distill;
pub mod flowmatch;
pub mod geodesic;
pub mod linalg;
pub mod metrics;
pub mod nets;
pub mod par;
pub mod persistence;
pub mod rng;
pub mod tasks;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
