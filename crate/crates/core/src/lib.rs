//! Contamination-resistant benchmark releases: prompts are shipped as a
//! model's key/value cache plus the hidden state entering its last block,
//! which is enough to run inference but carries no token sequence to train on.

pub mod corpus;
pub mod crd_format;
pub mod curation;
pub mod error;
pub mod evaluation;
pub mod lab;
pub mod linalg;
pub mod tensorfile;
pub mod tinyformer;
pub mod translation;

pub use crd_format::{CrdFile, CrdRecord, Datacard, DType};
pub use error::{CrdError, Result};
pub use tinyformer::{
    init_model, KVCache, Model, ModelConfig, ModelParams, PenultimateState, TokenSeq,
};
