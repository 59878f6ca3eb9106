//! Chord-conditioned pianoroll diffusion.
//!
//! Data pipeline (MIDI, pianorolls, chords, dataset files), the denoising
//! U-Net with Transformer-Mamba blocks and learnable wavelet skips, the
//! DDPM trainer and sampler, and the objective metrics.

pub mod chords;
pub mod dataset;
pub mod diffusion;
pub mod eval;
mod error;
pub mod midi;
pub mod pianoroll;
pub mod ssm;
pub mod synth;
pub mod unet;
pub mod wavelet;

pub use error::{ModelError, ModelResult};
