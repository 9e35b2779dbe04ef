use serde::{Deserialize, Serialize};

use crate::crd_format::file::HEADER_BYTES;
use crate::crd_format::payload::DType;
use crate::tinyformer::ModelConfig;

/// The dimensions that determine release size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageShape {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_model: usize,
}

impl StorageShape {
    /// Llama-2-7B: 32 layers, 32 key/value heads of width 128, hidden size 4096.
    pub const LLAMA2_7B: StorageShape = StorageShape {
        n_layers: 32,
        n_kv_heads: 32,
        d_head: 128,
        d_model: 4096,
    };
}

impl From<&ModelConfig> for StorageShape {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_kv_heads: cfg.n_kv_heads,
            d_head: cfg.d_head(),
            d_model: cfg.d_model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageEstimate {
    /// `2 · L · tokens · n_kv_heads · d_head · dtype_bytes · retain`.
    pub payload_bytes: f64,
    /// Container header and checksum plus one record's fixed fields and `h`.
    pub overhead_bytes: f64,
}

impl StorageEstimate {
    pub fn total_bytes(&self) -> f64 {
        self.payload_bytes + self.overhead_bytes
    }
}

/// Size of a single-record container holding `total_tokens` cached positions.
pub fn estimate_storage(shape: StorageShape, total_tokens: u64, dtype: DType, retain_fraction: f64) -> StorageEstimate {
    let b = dtype.bytes() as f64;
    let payload = 2.0
        * shape.n_layers as f64
        * total_tokens as f64
        * shape.n_kv_heads as f64
        * shape.d_head as f64
        * b
        * retain_fraction;
    let retained_indices = 4.0 * shape.n_layers as f64 * total_tokens as f64 * retain_fraction;
    let scales = if dtype == DType::Q8 { 4 * (2 * shape.n_layers + 1) } else { 0 };
    let record_fixed = 2 + 4 + 2 + 2 + 2 + 1 + 4 * shape.n_layers + 4 + shape.d_model * dtype.bytes() + scales + 4 + 8;
    let container = HEADER_BYTES + 8 + 8;
    StorageEstimate {
        payload_bytes: payload,
        overhead_bytes: (container + record_fixed) as f64 + retained_indices,
    }
}
