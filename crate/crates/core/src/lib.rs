//! Text-conditioned latent diffusion on a synthetic tissue corpus, with
//! relational alignment losses between image, caption and category
//! similarity structure.

pub mod alignment;
pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
