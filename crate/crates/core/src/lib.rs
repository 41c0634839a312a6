//! Desk-scale reference-guided cascaded latent video diffusion.
//!
//! The pipeline: a text prompt and a reference image condition three
//! cascaded spatio-temporal denoisers in the latent space of a small
//! convolutional autoencoder; a flow-based temporal super-resolution stage
//! multiplies the frame count; a temporally extended decoder maps the
//! latent video back to pixels.

pub mod autodiff;
pub mod cascade;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod flow_tsr;
pub mod nn;
pub mod numerics;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
