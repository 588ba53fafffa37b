//! Vocoder-free voice conversion.
//!
//! A conditional autoregressive waveform model is trained per target
//! speaker on speaker-independent conditioning (phonetic posteriorgrams
//! plus log-f0 and voicing), then driven sample-by-sample to synthesize
//! converted speech directly in the time domain — no parametric vocoder in
//! the loop.

pub mod checkpoint;
pub mod codec;
pub mod compute;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod generator;
pub mod io;
pub mod rng;
pub mod signal;
pub mod trainer;
pub mod wavenet;

pub use error::{Error, Result};
