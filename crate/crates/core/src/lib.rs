//! Score-based graph diffusion with classifier guidance that controls how far
//! generated graphs drift from the training distribution.

pub mod datasets;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod graph;
pub mod guidance;
pub mod io;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod sde;
pub mod tensor;

pub use error::{Error, Result};
