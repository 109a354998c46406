//! Streaming spectrogram inversion.
//!
//! A small causal CNN predicts frequency and baseband phase differences from
//! STFT log-magnitudes; each frame's phase is then recovered by a weighted
//! complex least-squares problem whose normal equations are Hermitian
//! tridiagonal and solved in linear time.

pub mod bench;
pub mod cnn;
pub mod error;
pub mod phase;
pub mod pipeline;
pub mod solver;
pub mod stft;
pub mod synth;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
