//! Continues short piano prompts on a sixteenth-note grid.
//!
//! Scores are tokenized into a compact bar/position/pitch/duration stream,
//! scored by a small recurrent language model and sampled under a grammar
//! mask so that every continuation is well formed.

pub mod corpus;
pub mod error;
pub mod midi;
pub mod model;
pub mod remi;
pub mod sampler;
pub mod score;
pub mod train;

pub use error::{Error, Result};
