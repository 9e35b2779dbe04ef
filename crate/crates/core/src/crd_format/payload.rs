use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{CrdError, Result};
use crate::tinyformer::{KVCache, LayerCache};

/// Element type of released tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F16,
    Q8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::Q8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            2 => Ok(DType::Q8),
            other => Err(CrdError::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::Q8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::Q8 => "q8",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = CrdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f16" => Ok(DType::F16),
            "q8" => Ok(DType::Q8),
            other => Err(CrdError::Parameter(format!("unknown dtype `{other}` (f32, f16, q8)"))),
        }
    }
}

/// One released tensor in its stored representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F16(Vec<f16>),
    /// Symmetric per-tensor quantization: value = `data[i] · scale`.
    Q8 { data: Vec<i8>, scale: f32 },
}

/// Scale for symmetric int8 quantization: max-abs / 127, or 1 for an all-zero tensor.
pub fn q8_scale(values: &[f32]) -> f32 {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        1.0
    } else {
        max / 127.0
    }
}

impl Payload {
    pub fn encode(values: &[f32], dtype: DType) -> Self {
        match dtype {
            DType::F32 => Payload::F32(values.to_vec()),
            DType::F16 => Payload::F16(values.iter().map(|&v| f16::from_f32(v)).collect()),
            DType::Q8 => {
                let scale = q8_scale(values);
                let data = values
                    .iter()
                    .map(|&v| (v / scale).round().clamp(-127.0, 127.0) as i8)
                    .collect();
                Payload::Q8 { data, scale }
            }
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F16(_) => DType::F16,
            Payload::Q8 { .. } => DType::Q8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F16(v) => v.len(),
            Payload::Q8 { data, .. } => data.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&self) -> Option<f32> {
        match self {
            Payload::Q8 { scale, .. } => Some(*scale),
            _ => None,
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Payload::F32(v) => v.clone(),
            Payload::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            Payload::Q8 { data, scale } => data.iter().map(|&q| q as f32 * scale).collect(),
        }
    }

    pub(crate) fn write_elements(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
            Payload::Q8 { data, .. } => out.extend(data.iter().map(|&q| q as u8)),
        }
    }

    /// Parses `n` elements; q8 payloads get their scale filled in later.
    pub(crate) fn read_elements(bytes: &[u8], dtype: DType) -> Self {
        match dtype {
            DType::F32 => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F16 => Payload::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes(c.try_into().expect("2 bytes"))))
                    .collect(),
            ),
            DType::Q8 => Payload::Q8 {
                data: bytes.iter().map(|&b| b as i8).collect(),
                scale: 1.0,
            },
        }
    }

    pub(crate) fn set_scale(&mut self, s: f32) {
        if let Payload::Q8 { scale, .. } = self {
            *scale = s;
        }
    }

    /// Bitwise comparison (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Payload) -> bool {
        match (self, other) {
            (Payload::F32(a), Payload::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Payload::F16(a), Payload::F16(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Payload::Q8 { data: a, scale: s }, Payload::Q8 { data: b, scale: t }) => {
                a == b && s.to_bits() == t.to_bits()
            }
            _ => false,
        }
    }
}

/// One layer of a stored cache.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub positions: Vec<u32>,
    pub keys: Payload,
    pub values: Payload,
}

/// A key/value cache in its released element type. Dequantized on read.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCache {
    pub dtype: DType,
    pub prompt_len: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub layers: Vec<StoredLayer>,
}

pub fn quantize_cache(cache: &KVCache<f32>, dtype: DType) -> QuantizedCache {
    QuantizedCache {
        dtype,
        prompt_len: cache.prompt_len(),
        n_kv_heads: cache.n_kv_heads(),
        d_head: cache.d_head(),
        layers: cache
            .layers()
            .iter()
            .map(|l| StoredLayer {
                positions: l.positions.clone(),
                keys: Payload::encode(&l.keys, dtype),
                values: Payload::encode(&l.values, dtype),
            })
            .collect(),
    }
}

impl QuantizedCache {
    pub fn dequantize(&self) -> Result<KVCache<f32>> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerCache {
                keys: l.keys.to_f32(),
                values: l.values.to_f32(),
                positions: l.positions.clone(),
            })
            .collect();
        KVCache::from_parts(layers, self.prompt_len, self.n_kv_heads, self.d_head)
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn bit_eq(&self, other: &QuantizedCache) -> bool {
        self.dtype == other.dtype
            && self.prompt_len == other.prompt_len
            && self.n_kv_heads == other.n_kv_heads
            && self.d_head == other.d_head
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.positions == b.positions && a.keys.bit_eq(&b.keys) && a.values.bit_eq(&b.values)
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q8_error_is_within_half_a_step() {
        let values: Vec<f32> = (0..200).map(|i| ((i * 37) % 101) as f32 * 0.013 - 0.6).collect();
        let p = Payload::encode(&values, DType::Q8);
        let scale = p.scale().unwrap();
        for (a, b) in values.iter().zip(p.to_f32()) {
            assert!((a - b).abs() <= scale / 2.0 * (1.0 + 1e-5));
        }
    }

    #[test]
    fn all_zero_q8_uses_unit_scale() {
        let p = Payload::encode(&[0.0; 5], DType::Q8);
        assert_eq!(p.scale(), Some(1.0));
        assert_eq!(p.to_f32(), vec![0.0; 5]);
    }

    #[test]
    fn f16_projection_is_idempotent() {
        let values = [0.1f32, -3.3, 1e-3, 65000.0];
        let once = Payload::encode(&values, DType::F16).to_f32();
        let twice = Payload::encode(&once, DType::F16).to_f32();
        assert_eq!(once, twice);
    }

    #[test]
    fn f32_is_identity() {
        let values = [0.1f32, -0.0, f32::MIN_POSITIVE];
        assert!(Payload::encode(&values, DType::F32).bit_eq(&Payload::F32(values.to_vec())));
    }

    #[test]
    fn dtype_codes_round_trip() {
        for d in [DType::F32, DType::F16, DType::Q8] {
            assert_eq!(DType::from_code(d.code()).unwrap(), d);
            assert_eq!(d.as_str().parse::<DType>().unwrap(), d);
        }
        assert!(DType::from_code(9).is_err());
    }
}
