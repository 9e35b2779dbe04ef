//! A single released benchmark item and its byte layout.
//!
//! Record layout (little-endian): id length u16 + UTF-8 id | prompt length
//! u32 | layer count u16 | kv heads u16 | head size u16 | dtype u8 | per
//! layer: retained count u32, retained positions u32 × count, K payload, V
//! payload | h length u32 + h payload | q8 scales f32 × (2L + 1), ordered K₀,
//! V₀, K₁, V₁, …, h (q8 only) | answer length u32 + UTF-8 answer | FNV-1a
//! checksum u64 of every preceding record byte.

use crate::crd_format::payload::{DType, Payload, QuantizedCache, StoredLayer};
use crate::error::{CrdError, Result};
use crate::tensorfile::fnv64;
use crate::tinyformer::{KVCache, PenultimateState};

/// What a serialized field can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Free-form record name chosen by the curator.
    Name,
    /// A single length or dimension.
    Dimension,
    DTypeTag,
    /// Strictly ascending positions below the prompt length.
    RetainedPositions,
    /// Floating-point or quantized activations.
    Activations,
    QuantScales,
    /// Plaintext ground-truth answer.
    Label,
    Checksum,
}

/// The complete record schema, in serialization order.
pub const RECORD_FIELDS: &[(&str, FieldKind)] = &[
    ("id", FieldKind::Name),
    ("prompt_len", FieldKind::Dimension),
    ("n_layers", FieldKind::Dimension),
    ("n_kv_heads", FieldKind::Dimension),
    ("d_head", FieldKind::Dimension),
    ("dtype", FieldKind::DTypeTag),
    ("layer.retained_count", FieldKind::Dimension),
    ("layer.positions", FieldKind::RetainedPositions),
    ("layer.keys", FieldKind::Activations),
    ("layer.values", FieldKind::Activations),
    ("h_len", FieldKind::Dimension),
    ("h", FieldKind::Activations),
    ("scales", FieldKind::QuantScales),
    ("answer", FieldKind::Label),
    ("checksum", FieldKind::Checksum),
];

/// One benchmark item in released form: the prompt's cache and penultimate
/// state, and the plaintext answer.
#[derive(Debug, Clone, PartialEq)]
pub struct CrdRecord {
    pub id: String,
    pub cache: QuantizedCache,
    pub h: Payload,
    pub answer: String,
}

impl CrdRecord {
    pub fn from_release(
        id: impl Into<String>,
        cache: &KVCache<f32>,
        h: &PenultimateState<f32>,
        answer: impl Into<String>,
        dtype: DType,
    ) -> Self {
        Self {
            id: id.into(),
            cache: crate::crd_format::payload::quantize_cache(cache, dtype),
            h: Payload::encode(&h.h, dtype),
            answer: answer.into(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.cache.dtype
    }

    pub fn prompt_len(&self) -> usize {
        self.cache.prompt_len
    }

    pub fn n_layers(&self) -> usize {
        self.cache.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.h.len()
    }

    /// Dequantized cache and penultimate state, ready for decoding.
    pub fn to_release(&self) -> Result<(KVCache<f32>, PenultimateState<f32>)> {
        Ok((self.cache.dequantize()?, PenultimateState::new(self.h.to_f32())))
    }

    pub fn validate(&self) -> Result<()> {
        let fmt_err = |m: String| Err(CrdError::Format(format!("record `{}`: {m}", self.id)));
        let c = &self.cache;
        if self.id.len() > u16::MAX as usize {
            return fmt_err("id longer than 65535 bytes".into());
        }
        if c.layers.is_empty() || c.layers.len() > u16::MAX as usize {
            return fmt_err(format!("{} layers", c.layers.len()));
        }
        if c.n_kv_heads > u16::MAX as usize || c.d_head > u16::MAX as usize || c.prompt_len > u32::MAX as usize {
            return fmt_err("dimension exceeds header width".into());
        }
        if c.prompt_len == 0 {
            return fmt_err("prompt length 0".into());
        }
        if self.h.dtype() != c.dtype {
            return fmt_err(format!("h stored as {} in a {} record", self.h.dtype(), c.dtype));
        }
        let row = c.n_kv_heads * c.d_head;
        for (l, layer) in c.layers.iter().enumerate() {
            if layer.keys.dtype() != c.dtype || layer.values.dtype() != c.dtype {
                return fmt_err(format!("layer {l} payload dtype differs from record dtype {}", c.dtype));
            }
            let n = layer.positions.len();
            if layer.keys.len() != n * row || layer.values.len() != n * row {
                return fmt_err(format!("layer {l} payload size does not match {n} retained rows"));
            }
            check_positions(&layer.positions, c.prompt_len).map_err(|m| {
                CrdError::Format(format!("record `{}` layer {l}: {m}", self.id))
            })?;
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &CrdRecord) -> bool {
        self.id == other.id && self.answer == other.answer && self.h.bit_eq(&other.h) && self.cache.bit_eq(&other.cache)
    }
}

fn check_positions(positions: &[u32], t: usize) -> std::result::Result<(), String> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err("retained positions not strictly ascending".into());
    }
    match positions.last() {
        Some(&last) if last as usize == t - 1 => Ok(()),
        _ => Err(format!("final prompt position {} not retained", t - 1)),
    }
}

pub fn encode_record(record: &CrdRecord) -> Result<Vec<u8>> {
    record.validate()?;
    let c = &record.cache;
    let mut out = Vec::new();
    out.extend_from_slice(&(record.id.len() as u16).to_le_bytes());
    out.extend_from_slice(record.id.as_bytes());
    out.extend_from_slice(&(c.prompt_len as u32).to_le_bytes());
    out.extend_from_slice(&(c.layers.len() as u16).to_le_bytes());
    out.extend_from_slice(&(c.n_kv_heads as u16).to_le_bytes());
    out.extend_from_slice(&(c.d_head as u16).to_le_bytes());
    out.push(c.dtype.code());
    for layer in &c.layers {
        out.extend_from_slice(&(layer.positions.len() as u32).to_le_bytes());
        for &p in &layer.positions {
            out.extend_from_slice(&p.to_le_bytes());
        }
        layer.keys.write_elements(&mut out);
        layer.values.write_elements(&mut out);
    }
    out.extend_from_slice(&(record.h.len() as u32).to_le_bytes());
    record.h.write_elements(&mut out);
    if c.dtype == DType::Q8 {
        for layer in &c.layers {
            for p in [&layer.keys, &layer.values] {
                out.extend_from_slice(&p.scale().expect("q8 payload").to_le_bytes());
            }
        }
        out.extend_from_slice(&record.h.scale().expect("q8 payload").to_le_bytes());
    }
    out.extend_from_slice(&(record.answer.len() as u32).to_le_bytes());
    out.extend_from_slice(record.answer.as_bytes());
    let sum = fnv64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CrdError::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CrdError::Format(format!("{what} is not UTF-8")))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses one record; `bytes` must be exactly the record including its checksum.
pub fn decode_record(bytes: &[u8]) -> Result<CrdRecord> {
    if bytes.len() < 8 {
        return Err(CrdError::Format("record shorter than its checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if stored != fnv64(body) {
        return Err(CrdError::Corruption("record checksum mismatch".into()));
    }
    let mut r = Reader::new(body);
    let id_len = r.u16()? as usize;
    let id = r.utf8(id_len, "record id")?;
    let prompt_len = r.u32()? as usize;
    let n_layers = r.u16()? as usize;
    let n_kv_heads = r.u16()? as usize;
    let d_head = r.u16()? as usize;
    let dtype = DType::from_code(r.u8()?)?;
    let row = n_kv_heads * d_head;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let count = r.u32()? as usize;
        let positions = (0..count).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?;
        let n_bytes = count
            .checked_mul(row)
            .and_then(|n| n.checked_mul(dtype.bytes()))
            .ok_or_else(|| CrdError::Format("payload size overflows".into()))?;
        let keys = Payload::read_elements(r.take(n_bytes)?, dtype);
        let values = Payload::read_elements(r.take(n_bytes)?, dtype);
        layers.push(StoredLayer { positions, keys, values });
    }
    let h_len = r.u32()? as usize;
    let mut h = Payload::read_elements(r.take(h_len * dtype.bytes())?, dtype);
    if dtype == DType::Q8 {
        for layer in &mut layers {
            layer.keys.set_scale(r.f32()?);
            layer.values.set_scale(r.f32()?);
        }
        h.set_scale(r.f32()?);
    }
    let y_len = r.u32()? as usize;
    let answer = r.utf8(y_len, "answer")?;
    if r.remaining() != 0 {
        return Err(CrdError::Format(format!("{} trailing bytes after record", r.remaining())));
    }
    let record = CrdRecord {
        id,
        cache: QuantizedCache {
            dtype,
            prompt_len,
            n_kv_heads,
            d_head,
            layers,
        },
        h,
        answer,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::LayerCache;

    fn record(dtype: DType) -> CrdRecord {
        let layer = |s: f32| LayerCache {
            keys: (0..3 * 4).map(|i| i as f32 * s).collect(),
            values: (0..3 * 4).map(|i| -(i as f32) * s).collect(),
            positions: vec![0, 2, 4],
        };
        let cache = KVCache::from_parts(vec![layer(0.5), layer(0.25)], 5, 2, 2).unwrap();
        let h = PenultimateState::new(vec![0.1, -0.2, 0.3, 0.0]);
        CrdRecord::from_release("item-7", &cache, &h, "forty two", dtype)
    }

    #[test]
    fn round_trip_every_dtype() {
        for dtype in [DType::F32, DType::F16, DType::Q8] {
            let r = record(dtype);
            let back = decode_record(&encode_record(&r).unwrap()).unwrap();
            assert!(r.bit_eq(&back), "{dtype}");
        }
    }

    #[test]
    fn any_single_byte_flip_is_detected() {
        let bytes = encode_record(&record(DType::Q8)).unwrap();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x01;
            assert!(matches!(decode_record(&b), Err(CrdError::Corruption(_))), "byte {i}");
        }
    }

    #[test]
    fn mixed_dtypes_are_a_format_error() {
        let mut r = record(DType::F32);
        r.h = Payload::encode(&[0.0; 4], DType::F16);
        assert!(matches!(encode_record(&r), Err(CrdError::Format(_))));
    }

    #[test]
    fn schema_has_no_token_slot() {
        assert!(RECORD_FIELDS.iter().all(|(name, _)| !name.contains("token")));
        assert_eq!(RECORD_FIELDS.first().unwrap().0, "id");
    }
}
