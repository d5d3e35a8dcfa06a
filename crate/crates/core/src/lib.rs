//! Masked contrastive language-audio pre-training with spectrogram
//! reconstruction, built on a small fp64 autodiff engine.

pub mod audio;
pub mod augment;
pub mod error;
pub mod evaluation;
pub mod flops;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod synth;
pub mod training;

pub use error::{FlapError, Result};
