//! Brownian-bridge diffusion engine that turns low-resolution multichannel
//! ion images into 10× super-resolved stain-domain RGB images.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod fmt;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod quality;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, ValueRange};
