use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CrdError, Result};
use crate::tinyformer::tokenizer::BYTE_VOCAB_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosEncoding {
    Rotary,
    LearnedAbsolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    Rms,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Swiglu,
    Gelu,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = CrdError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(CrdError::Config(format!(
                        "unknown {} value `{other}`",
                        stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(PosEncoding { Rotary => "rotary", LearnedAbsolute => "learned-absolute" });
text_enum!(NormKind { Rms => "rms", Layer => "layer" });
text_enum!(Activation { Swiglu => "swiglu", Gelu => "gelu" });

/// Shape and architecture of a decoder-only transformer.
///
/// `n_kv_heads == n_heads` is multi-head attention; any proper divisor gives
/// grouped-query attention where each key/value head serves
/// `n_heads / n_kv_heads` query heads.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub pos_encoding: PosEncoding,
    pub norm: NormKind,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            n_kv_heads: 4,
            vocab_size: BYTE_VOCAB_SIZE,
            max_context: 256,
            pos_encoding: PosEncoding::Rotary,
            norm: NormKind::Rms,
            activation: Activation::Swiglu,
            seed: 0,
        }
    }
}

const KEYS: [&str; 10] = [
    "n_layers",
    "d_model",
    "n_heads",
    "n_kv_heads",
    "vocab_size",
    "max_context",
    "pos_encoding",
    "norm",
    "activation",
    "seed",
];

impl ModelConfig {
    /// The grouped-query variant of the default micro-architecture.
    pub fn default_gqa() -> Self {
        Self {
            n_kv_heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CrdError::Config(m));
        if self.n_layers == 0 {
            return err("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_model == 0 {
            return err("d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "n_heads={} does not divide d_model={}",
                self.n_heads, self.d_model
            ));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return err(format!(
                "n_kv_heads={} does not divide n_heads={}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.pos_encoding == PosEncoding::Rotary && !self.d_head().is_multiple_of(2) {
            return err(format!("rotary encoding needs an even head size, got {}", self.d_head()));
        }
        if self.vocab_size < 4 {
            return err(format!("vocab_size must be at least 4, got {}", self.vocab_size));
        }
        if self.max_context == 0 {
            return err("max_context must be positive".into());
        }
        if self.d_model > u16::MAX as usize || self.n_layers > u16::MAX as usize {
            return err("dimensions exceed the 16-bit limits of the release format".into());
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of one cached key (or value) row: `n_kv_heads · d_head`.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head()
    }

    /// Query heads served by each key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        match self.activation {
            Activation::Gelu => 4 * self.d_model,
            Activation::Swiglu => (8 * self.d_model / 3).div_ceil(4) * 4,
        }
    }

    pub fn is_gqa(&self) -> bool {
        self.n_kv_heads != self.n_heads
    }

    /// Canonical `key=value` lines; used in checkpoint headers and fingerprints.
    pub fn to_kv_text(&self) -> String {
        let values = [
            self.n_layers.to_string(),
            self.d_model.to_string(),
            self.n_heads.to_string(),
            self.n_kv_heads.to_string(),
            self.vocab_size.to_string(),
            self.max_context.to_string(),
            self.pos_encoding.to_string(),
            self.norm.to_string(),
            self.activation.to_string(),
            self.seed.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Parses lines produced by [`Self::to_kv_text`]. Unknown or missing keys are errors.
    pub fn from_kv_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = [false; KEYS.len()];
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CrdError::Config(format!("malformed config line `{line}`")))?;
            let idx = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| CrdError::Config(format!("unknown config key `{key}`")))?;
            seen[idx] = true;
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| CrdError::Config(format!("bad value for {key}: `{value}`")))
            };
            match key {
                "n_layers" => cfg.n_layers = num()?,
                "d_model" => cfg.d_model = num()?,
                "n_heads" => cfg.n_heads = num()?,
                "n_kv_heads" => cfg.n_kv_heads = num()?,
                "vocab_size" => cfg.vocab_size = num()?,
                "max_context" => cfg.max_context = num()?,
                "pos_encoding" => cfg.pos_encoding = value.parse()?,
                "norm" => cfg.norm = value.parse()?,
                "activation" => cfg.activation = value.parse()?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| CrdError::Config(format!("bad seed `{value}`")))?
                }
                _ => unreachable!(),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CrdError::Config(format!("missing config key `{}`", KEYS[i])));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::default_gqa().validate().unwrap();
        assert_eq!(ModelConfig::default().vocab_size, 259);
    }

    #[test]
    fn rejects_non_dividing_heads() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(CrdError::Config(_))));

        let cfg = ModelConfig {
            n_kv_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_zero_layers() {
        let cfg = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_text_round_trip() {
        let cfg = ModelConfig {
            pos_encoding: PosEncoding::LearnedAbsolute,
            norm: NormKind::Layer,
            activation: Activation::Gelu,
            seed: 99,
            ..ModelConfig::default_gqa()
        };
        let text = cfg.to_kv_text();
        let back = ModelConfig::from_kv_lines(text.lines()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn kv_text_rejects_unknown_key() {
        let mut text = ModelConfig::default().to_kv_text();
        text.push_str("dropout=0.1\n");
        assert!(ModelConfig::from_kv_lines(text.lines()).is_err());
    }
}
