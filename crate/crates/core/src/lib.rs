//! Desk-scale masked-diffusion language model lab.
//!
//! A tiny bidirectional mask predictor is pretrained on synthetic tasks,
//! decodes its own trajectories as a teacher, and is self-distilled into a
//! student with a consistency + certainty-forcing objective so that more
//! tokens clear the remasking threshold per forward pass.

pub mod decode;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod num;
pub mod tasks;

pub use error::{Error, Result};
