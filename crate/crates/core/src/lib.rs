//! Inversion of frozen conditional diffusion models into discriminative
//! predictors: gradient-based in-vocabulary optimization of the conditioning
//! input, with a label-space prior diffusion model completing the posterior.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod invert;
pub mod labels;
pub mod models;
pub mod nn;
pub mod train;

pub use error::{DiveError, Result};
