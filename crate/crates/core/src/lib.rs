//! Threshold rectified attention (TRA) and threshold differential attention (TDA).
//!
//! The crate is organised bottom-up:
//!
//! - [`attn`]: dense reference implementations of softmax, ReLA, differential
//!   softmax, TRA and TDA with materialized weight matrices.
//! - [`kernel`]: tile-blocked streaming TRA forward/backward and the TDA
//!   wrapper. Never allocates a `T x T` intermediate.
//! - [`diagnostics`]: sparsity, effective entropy, dispersion ratio,
//!   generalized sink ratio and peak magnitude metrics.
//! - [`theory`]: Monte Carlo estimates of spurious and consensus survivor
//!   counts against their analytic bounds.
//! - [`model`]: a small decoder-only causal LM with RoPE and a pluggable
//!   attention mechanism, trained with hand-written backprop.
//! - [`passkey`]: passkey retrieval prompt construction and scoring.

pub mod attn;
pub mod diagnostics;
pub mod error;
pub mod kernel;
pub mod model;
pub mod numeric;
pub mod passkey;
pub mod theory;

pub use attn::{AttnBatch, AttnParams, AttnResult, Mechanism};
pub use error::{Error, Result};
pub use kernel::{GradTriple, ScratchAudit, TileConfig};
pub use numeric::Real;
