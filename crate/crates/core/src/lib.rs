//! Training-free style transfer for latent diffusion through heterogeneous
//! attention modulation, on a self-contained toy diffusion stack.

pub mod attention;
pub mod denoiser;
pub mod error;
pub mod fixtures;
pub mod hamt;
pub mod image_io;
pub mod metrics;
pub mod modulation;
pub mod pipeline;
pub mod real;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
