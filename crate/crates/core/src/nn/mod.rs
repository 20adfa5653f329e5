//! Minimal neural-network toolkit: reverse-mode autodiff, dense layers,
//! Adam/AdamW and parameter EMA.

mod params;
mod tape;

pub use params::{glorot, Adam, AdamConfig, Ema, Linear, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
