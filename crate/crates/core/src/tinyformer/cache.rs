use crate::error::{CrdError, Result};
use crate::tinyformer::config::ModelConfig;

/// Keys and values of one layer for the positions currently held.
///
/// Rows are `[n_kv_heads × d_head]` and keys already carry their rotary phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    /// Original sequence position of every row, strictly ascending.
    pub positions: Vec<u32>,
}

impl<T> LayerCache<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

impl<T> Default for LayerCache<T> {
    fn default() -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
        }
    }
}

/// The per-layer key/value cache of a prompt, possibly compressed, plus any
/// continuation positions appended while decoding.
///
/// Not `Sync`-shared across generations in practice: every decode step mutates it.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache<T> {
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) prompt_len: usize,
    pub(crate) next_pos: usize,
    pub(crate) n_kv_heads: usize,
    pub(crate) d_head: usize,
}

impl<T: Copy> KVCache<T> {
    pub(crate) fn empty(cfg: &ModelConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers).map(|_| LayerCache::default()).collect(),
            prompt_len: 0,
            next_pos: 0,
            n_kv_heads: cfg.n_kv_heads,
            d_head: cfg.d_head(),
        }
    }

    /// Assembles a prompt cache from released parts, checking every structural invariant.
    pub fn from_parts(
        layers: Vec<LayerCache<T>>,
        prompt_len: usize,
        n_kv_heads: usize,
        d_head: usize,
    ) -> Result<Self> {
        if prompt_len == 0 {
            return Err(CrdError::Empty("cache has no prompt positions".into()));
        }
        if layers.is_empty() {
            return Err(CrdError::Shape("cache has no layers".into()));
        }
        let row = n_kv_heads * d_head;
        for (l, layer) in layers.iter().enumerate() {
            let n = layer.positions.len();
            if layer.keys.len() != n * row || layer.values.len() != n * row {
                return Err(CrdError::Shape(format!(
                    "layer {l}: {n} positions but {} key / {} value elements for row width {row}",
                    layer.keys.len(),
                    layer.values.len()
                )));
            }
            if layer.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CrdError::Validation(format!(
                    "layer {l}: retained positions not strictly ascending"
                )));
            }
            if layer.positions.last().copied() != Some(prompt_len as u32 - 1) {
                return Err(CrdError::Validation(format!(
                    "layer {l}: final prompt position {} not retained",
                    prompt_len - 1
                )));
            }
        }
        Ok(Self {
            layers,
            prompt_len,
            next_pos: prompt_len,
            n_kv_heads,
            d_head,
        })
    }

    pub fn layers(&self) -> &[LayerCache<T>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerCache<T> {
        &self.layers[l]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Sequence position the next decoded token will occupy.
    pub fn next_pos(&self) -> usize {
        self.next_pos
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// True when no continuation token has been appended yet.
    pub fn is_fresh(&self) -> bool {
        self.next_pos == self.prompt_len
    }

    pub(crate) fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layers.len() != cfg.n_layers
            || self.n_kv_heads != cfg.n_kv_heads
            || self.d_head != cfg.d_head()
        {
            return Err(CrdError::Shape(format!(
                "cache shape (L={}, kv_heads={}, d_head={}) does not match model (L={}, kv_heads={}, d_head={})",
                self.layers.len(),
                self.n_kv_heads,
                self.d_head,
                cfg.n_layers,
                cfg.n_kv_heads,
                cfg.d_head()
            )));
        }
        Ok(())
    }
}

/// The input to the last decoder block at the final prompt position.
#[derive(Debug, Clone, PartialEq)]
pub struct PenultimateState<T> {
    pub h: Vec<T>,
}

impl<T> PenultimateState<T> {
    pub fn new(h: Vec<T>) -> Self {
        Self { h }
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }
}

/// Which prompt queries contribute to a position's eviction score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheScoring {
    /// Attention from the final prompt query only.
    #[default]
    FinalQuery,
    /// Attention summed over every prompt query (heavy-hitter style).
    Accumulated,
}

impl CacheScoring {
    pub const ALL: [CacheScoring; 2] = [CacheScoring::FinalQuery, CacheScoring::Accumulated];

    /// The name recorded in datacards.
    pub fn as_str(self) -> &'static str {
        match self {
            CacheScoring::FinalQuery => "final-query-attention-mass",
            CacheScoring::Accumulated => "accumulated-attention-mass",
        }
    }
}

impl std::fmt::Display for CacheScoring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CacheScoring {
    type Err = CrdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final-query-attention-mass" | "final-query" => Ok(CacheScoring::FinalQuery),
            "accumulated-attention-mass" | "accumulated" => Ok(CacheScoring::Accumulated),
            _ => Err(CrdError::Parameter(format!(
                "unknown cache scoring `{s}`, expected final-query or accumulated"
            ))),
        }
    }
}

/// Attention mass received by each prompt position, summed over heads and
/// over the queries selected by a [`CacheScoring`]; one row per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub per_layer: Vec<Vec<f64>>,
}
