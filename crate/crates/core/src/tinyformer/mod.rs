//! A small decoder-only transformer with two execution paths over the same
//! kernels: a full-sequence pass for training and a cache-resumed pass for
//! inference.

mod backward;
pub mod cache;
pub mod checkpoint;
pub mod config;
mod forward;
pub mod infer;
pub mod ops;
pub mod params;
pub mod tokenizer;
pub mod train;

pub use backward::nll_loss;
pub use cache::{AttentionScores, CacheScoring, KVCache, LayerCache, PenultimateState};
pub use checkpoint::{
    checkpoint_bytes, fingerprint, load_checkpoint, parse_checkpoint, save_checkpoint, Fingerprint, Model,
};
pub use config::{Activation, ModelConfig, NormKind, PosEncoding};
pub use forward::Logits;
pub(crate) use forward::RopePhase;
pub use infer::{generate_with, CacheDecoder, DecodeMode, GenSettings, Step};
pub use params::{tensor_specs, LayerParams, ModelParams, NormParams, TensorSpec};
pub use tokenizer::{detokenize, TokenSeq, BOS, BYTE_VOCAB_SIZE, EOS, PAD};
pub use train::{batch_loss_and_grad, train_step, Optimizer, Trainer};

/// Deterministic initialization from `config` (see [`ModelParams::init`]).
pub fn init_model(config: &ModelConfig) -> error::Result<ModelParams<f32>> {
    ModelParams::init(config)
}

use crate::error;
