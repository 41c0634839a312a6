//! Reverse-mode differentiation, parameters and optimization.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod suite;
pub mod tape;

pub use optim::{accumulate_grads, scale_grads, Adam, AdamConfig};
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
