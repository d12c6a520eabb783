//! Graph-conditioned diffusion text generation with graph-aware adaptive noising.
//!
//! The crate is organised bottom-up:
//!
//! - [`kg`]: triples, serialization into marker-delimited sequences, vocabulary.
//! - [`alignment`]: alias expansion and mention linking between text and graph.
//! - [`schedule`]: cumulative noise schedules and the difficulty-driven token-wise schedules.
//! - [`model`]: latent embedding, forward noising, the encoder–decoder denoiser,
//!   training and DDPM/DDIM sampling.
//! - [`metrics`]: entity grounding (FGT), edit sensitivity (ESR), BLEU.
//! - [`cli`]: the command-line front end.

pub mod alignment;
pub mod cli;
pub mod error;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod synthetic;

pub use error::{Error, Result};
