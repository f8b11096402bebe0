//! Desk-scale diffusion inference engine with in-generation concept checking
//! and removal.
//!
//! The crate builds a small but complete text-to-image sampling loop around a
//! synthetic noise predictor whose outputs are analytically checkable: every
//! generated image is an attention-weighted composition of per-token spatial
//! patterns, so planting a concept token in a prompt plants a known pattern in
//! the output. On top of that loop sit:
//!
//! - checkpointed previews of the predicted final image ([`scheduler`],
//!   [`checker`]),
//! - a pluggable detector (rule-based pattern correlation, or an HTTP client
//!   speaking a fixed query/answer protocol to a vision-language model),
//! - concept removal attention: masked, temperature-scaled cross-attention
//!   toward a registered negative concept ([`cra`]),
//! - an experiment harness for sweeps, check-rate curves and ablations
//!   ([`harness`]).

pub mod checker;
pub mod config;
pub mod cra;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod numkernel;
pub mod pipeline;
pub mod scheduler;
pub mod text_embed;

pub use error::{Error, Result};
