//! Minimal differentiable building blocks for the conditioner and denoiser.

pub(crate) mod layers;
mod params;
mod real;
mod tape;

pub use params::{Init, ParamEntry, Parameters};
pub(crate) use params::ParamBuilder;
pub use real::Real;
pub use tape::{Dims, Gradients, Tape, Var, GROUP_NORM_EPS};
