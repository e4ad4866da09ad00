//! Training and evaluation framework for a 16 kHz speech VAE with semantic
//! alignment regularization: 40 Hz / 64-dim latents, GAN-trained AMP-block
//! decoder, frozen-SSL cosine alignment, STOI evaluation, and latent export
//! for downstream TTS.

pub mod align;
pub mod audio;
pub mod ckpt;
pub mod config;
pub mod disc;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod latent;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod stft;
pub mod stoi;
pub mod trainer;

pub use error::{Error, Result};
