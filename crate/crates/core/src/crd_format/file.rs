//! Dataset container: `"CRD1"` | version u16 | anchor fingerprint (32 bytes)
//! | record count u32 | absolute record offsets u64 × count | records |
//! FNV-1a checksum u64 of every preceding byte.

use std::path::Path;

use crate::crd_format::record::{decode_record, encode_record, CrdRecord, Reader};
use crate::error::{CrdError, Result};
use crate::tensorfile::fnv64;
use crate::tinyformer::Fingerprint;

pub const MAGIC: &[u8; 4] = b"CRD1";
pub const VERSION: u16 = 1;
/// Magic, version, fingerprint and record count.
pub const HEADER_BYTES: usize = 4 + 2 + 32 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CrdFile {
    pub fingerprint: Fingerprint,
    pub records: Vec<CrdRecord>,
}

impl CrdFile {
    pub fn new(fingerprint: Fingerprint) -> Self {
        Self {
            fingerprint,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let encoded = self.records.iter().map(encode_record).collect::<Result<Vec<_>>>()?;
        let count = u32::try_from(encoded.len()).map_err(|_| CrdError::Format("too many records".into()))?;
        let mut out = Vec::with_capacity(HEADER_BYTES + encoded.iter().map(|r| r.len() + 8).sum::<usize>() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.0);
        out.extend_from_slice(&count.to_le_bytes());
        let mut offset = (HEADER_BYTES + 8 * encoded.len()) as u64;
        for r in &encoded {
            out.extend_from_slice(&offset.to_le_bytes());
            offset += r.len() as u64;
        }
        for r in &encoded {
            out.extend_from_slice(r);
        }
        let sum = fnv64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CrdError::Format("bad magic: not a CRD container".into()));
        }
        if bytes.len() < HEADER_BYTES + 8 {
            return Err(CrdError::Format("container truncated".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(CrdError::Version(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if u64::from_le_bytes(tail.try_into().expect("8 bytes")) != fnv64(body) {
            return Err(CrdError::Corruption("file checksum mismatch".into()));
        }
        let mut r = Reader::new(body);
        r.take(6)?;
        let fingerprint = Fingerprint(r.take(32)?.try_into().expect("32 bytes"));
        let count = r.u32()? as usize;
        let offsets = (0..count).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
        let data_start = (HEADER_BYTES + 8 * count) as u64;
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let start = offsets[i];
            let end = offsets.get(i + 1).copied().unwrap_or(body.len() as u64);
            if start < data_start || end <= start || end > body.len() as u64 || (i == 0 && start != data_start) {
                return Err(CrdError::Format(format!("record {i} has invalid offsets {start}..{end}")));
            }
            records.push(decode_record(&body[start as usize..end as usize])?);
        }
        if count == 0 && body.len() as u64 != data_start {
            return Err(CrdError::Format("trailing bytes in empty container".into()));
        }
        Ok(Self { fingerprint, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn bit_eq(&self, other: &CrdFile) -> bool {
        self.fingerprint == other.fingerprint
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.bit_eq(b))
    }
}
