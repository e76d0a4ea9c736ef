//! Shared-private encoder-decoders for style-aware sequence generation.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
