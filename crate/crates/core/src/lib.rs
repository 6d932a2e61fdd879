//! chirpscope-core: a self-contained workbench for studying what the
//! attention heads of a small vision transformer look at.
//!
//! The pipeline: synthesize labeled chirp spectrograms dressed up with
//! plot-style distractors ([`chirpgen`]), train a ViT regressor with LoRA
//! adapters to read the chirp parameters back out ([`vit`], [`train`]),
//! then interrogate every attention head — overlay its attention on the
//! input ([`interp_attention`]), knock it out and measure the damage
//! ([`interp_ablation`]), and classify it as task-focused, distractor-
//! focused, or mixed ([`semanticity`]).
//!
//! Everything is deterministic given a seed: same inputs, same bytes out.

pub mod chirpgen;
pub mod error;
pub mod interp_ablation;
pub mod interp_attention;
pub mod numerics;
pub mod raster;
pub mod semanticity;
pub mod train;
pub mod util;
pub mod vit;

pub use error::{Error, Result};
