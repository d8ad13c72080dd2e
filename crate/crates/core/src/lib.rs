//! Attention guidance from semantic masks for weakly supervised slide
//! classification.
//!
//! Semantic masks (tissue, clustered cell detections) become per-patch
//! attention targets that supervise attention-MIL and transformer
//! classifiers during training.

pub mod error;
pub mod grid;
pub mod guidance;
pub mod io;
pub mod pgm;

pub use error::{Result, SagError};
pub mod losses;
pub mod models;
pub mod synth;
pub mod config;
pub mod harness;
pub mod render;
pub mod cli;
