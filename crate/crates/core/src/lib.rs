//! Newsvendor order-quantity learning from censored sales.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod learner;
pub mod linear;
pub mod loss;
pub mod lp;
pub mod nn;
pub mod stats;
pub mod synth;
pub mod theory;
pub mod train;
pub mod tuning;

pub use error::{Error, Result};
