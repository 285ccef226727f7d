//! Audio-visual language model pipeline at desk scale: tensor numerics with
//! reverse-mode gradients, multimodal token encoding and projection,
//! modality-augmented training with selective branch activation, mock-backed
//! instruction dataset curation, and an evaluation harness.

pub mod encoding;
pub mod error;
pub mod nn;
pub mod numerics;

pub use error::{Error, Result};
