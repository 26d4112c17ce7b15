//! Differentiable tokenization of continuous modalities into a text
//! encoder-decoder, with the training regimes, decoders, synthetic benchmark
//! and metrics needed to study it at desk scale.

pub mod bench;
pub mod checkpoint;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod tokenization;
pub mod training;

pub use error::{Error, Result};
