//! Joint training of a re-identification encoder and a conditional latent
//! denoiser, where the denoiser's gradient reaches the encoder through a
//! condition built from the encoder's own identity probabilities.

pub mod backbone;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod lora;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
