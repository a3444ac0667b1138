//! Lossy compression by universally quantizing a latent at a diffusion
//! timestep and removing the quantization noise with a denoiser.
//!
//! The bin width at step `t` is `sqrt(12 * (1 - alpha_bar_t))`, so uniform
//! quantization noise has the same power as the diffusion noise at `t`.

pub mod codec;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod quantizer;
pub mod schedule;
mod special;
pub mod tensor;

pub use error::{Error, Result};
pub use schedule::{QuantizationSchedule, Snr, Spacing, VarianceSchedule};
pub use tensor::LatentTensor;
