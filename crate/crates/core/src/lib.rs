//! Deep FBSDE Picard solver for linear-quadratic mean-field Stackelberg games
//! whose coefficients are drawn at random per scenario.

pub mod adam;
pub mod alm;
pub mod checkpoint;
pub mod cli;
pub mod dfps;
pub mod error;
pub mod experiments;
pub mod fbsde;
pub mod linalg;
pub mod mlp;
pub mod model;
pub mod networks;
pub mod report;
pub mod riccati;
pub mod rng;
pub mod rollout;
pub mod tape;

pub use error::{DfpsError, Result};
