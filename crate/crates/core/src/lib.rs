//! Identity-preserving gaze velocity synthesis with a conditional diffusion
//! model.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
