//! Dual-retrieval image captioning at desk scale.
//!
//! Image-to-text retrieval fills a hard text prompt, image-to-image
//! retrieval supplies scene keywords that a cross-attention fusion network
//! turns into a residual visual prompt, and a small transformer decoder
//! generates the caption from both.

pub mod checkpoint;
pub mod cli;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod keywords;
pub mod numerics;
pub mod retrieval;
mod serial;
pub mod sfn;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
