//! Byte-level decoder-only language model with rotary embeddings, post-norm
//! residual blocks and a pluggable attention mechanism.

mod attention;
mod checkpoint;
mod network;
pub mod ops;
mod params;
mod train;

use serde::{Deserialize, Serialize};

use crate::attn::{AttnParams, Mechanism};
use crate::error::{Error, Result};
use crate::kernel::TileConfig;

pub use checkpoint::{Checkpoint, OptimizerState, RngState};
pub use network::{ForwardCache, Model};
pub use ops::{rope_apply, Rope, Scalar};
pub use params::{ParamSet, Tensor};
pub use train::{
    clip_grad_norm, lr_at, train, AdamW, Batch, Corpus, LossRecord, TrainConfig, TrainOptions, TrainOutcome,
    Trainer, BETA_FLOOR,
};

/// Vocabulary of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

/// Epsilon of the residual-stream RMSNorms.
pub const BLOCK_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AttentionBackend {
    /// Materialized `T x T` weights per head.
    #[default]
    Dense,
    /// Tile-streaming kernel; TRA and TDA only.
    Streaming { block_m: usize, block_n: usize },
}

impl AttentionBackend {
    pub fn tiles(&self) -> Option<TileConfig> {
        match *self {
            AttentionBackend::Dense => None,
            AttentionBackend::Streaming { block_m, block_n } => Some(TileConfig { block_m, block_n }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub mechanism: Mechanism,
    pub attn_params: AttnParams,
    pub rope_theta: f64,
    pub seed: u64,
    /// One threshold scale per head instead of one per layer.
    pub per_head_beta: bool,
    pub backend: AttentionBackend,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Mechanism::Tda)
    }
}

impl ModelConfig {
    /// d_model 128, 4 layers, 4 heads of width 32, context 256.
    pub fn desk(mechanism: Mechanism) -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 256,
            mechanism,
            attn_params: AttnParams::default(),
            rope_theta: 10_000.0,
            seed: 1337,
            per_head_beta: false,
            backend: AttentionBackend::Dense,
        }
    }

    /// d_model 768, 12 layers, 12 heads of width 64, context 1024, byte vocabulary.
    pub fn paper(mechanism: Mechanism) -> Self {
        Self {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            context_len: 1024,
            ..Self::desk(mechanism)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.attn_params.validate()?;
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::InvalidParam("model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidParam(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::InvalidParam("head_dim must be even for rotary embeddings".into()));
        }
        if self.context_len == 0 {
            return Err(Error::InvalidParam("context_len must be >= 1".into()));
        }
        if !(self.rope_theta > 0.0) {
            return Err(Error::InvalidParam("rope_theta must be > 0".into()));
        }
        if let Some(tiles) = self.backend.tiles() {
            tiles.validate()?;
            if !self.mechanism.is_thresholded() {
                return Err(Error::InvalidParam(format!(
                    "streaming backend supports tra and tda, not {}",
                    self.mechanism
                )));
            }
            if self.per_head_beta {
                return Err(Error::InvalidParam("streaming backend needs a shared beta".into()));
            }
        }
        Ok(())
    }
}
