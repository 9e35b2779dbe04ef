//! Self-describing tensor container shared by checkpoints and alignment maps.
//!
//! Layout: a text header (`<kind> <version>` line, `key=value` metadata lines,
//! `tensor <name> <rows> <cols>` lines, `end`), then every tensor as raw
//! little-endian `f32` in header order, then a `u64` FNV-1a checksum of that
//! raw payload.

use std::hash::Hasher;

use crate::error::{CrdError, Result};

/// FNV-1a (64-bit) over `bytes`.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub version: u32,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(kind: impl Into<String>, version: u32) -> Self {
        Self {
            kind: kind.into(),
            version,
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| CrdError::Format(format!("{} file is missing `{key}`", self.kind)))
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CrdError::Format(format!("{} file has no tensor `{name}`", self.kind)))
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        let n: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(4 * n);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn checksum(&self) -> u64 {
        fnv64(&self.payload_bytes())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{} {}\n", self.kind, self.version);
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k.starts_with("tensor ") || k == "end" {
                return Err(CrdError::Format(format!("metadata entry `{k}` cannot be encoded")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        for t in &self.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(CrdError::Shape(format!(
                    "tensor {} holds {} values for shape {}x{}",
                    t.name,
                    t.data.len(),
                    t.rows,
                    t.cols
                )));
            }
            header.push_str(&format!("tensor {} {} {}\n", t.name, t.rows, t.cols));
        }
        header.push_str("end\n");
        let payload = self.payload_bytes();
        let mut out = header.into_bytes();
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv64(&payload).to_le_bytes());
        Ok(out)
    }

    /// Parses a container whose first line must name `kind`.
    pub fn from_bytes(bytes: &[u8], kind: &str) -> Result<Self> {
        let mut cursor = 0;
        let mut next_line = |what: &str| -> Result<String> {
            let rest = &bytes[cursor..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| CrdError::Format(format!("truncated header while reading {what}")))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| CrdError::Format("header is not UTF-8".into()))?
                .to_string();
            cursor += nl + 1;
            Ok(line)
        };
        let first = next_line("kind line")?;
        let (k, ver) = first
            .split_once(' ')
            .ok_or_else(|| CrdError::Format(format!("not a {kind} file")))?;
        if k != kind {
            return Err(CrdError::Format(format!("expected a {kind} file, found `{k}`")));
        }
        let version: u32 = ver
            .parse()
            .map_err(|_| CrdError::Format(format!("bad version `{ver}`")))?;
        let mut file = TensorFile::new(kind, version);
        let mut shapes = Vec::new();
        loop {
            let line = next_line("header")?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| CrdError::Format(format!("bad tensor line `{line}`")))
                };
                if parts.len() != 3 {
                    return Err(CrdError::Format(format!("bad tensor line `{line}`")));
                }
                shapes.push((parts[0].to_string(), parse(parts[1])?, parse(parts[2])?));
            } else if let Some((k, v)) = line.split_once('=') {
                if !shapes.is_empty() {
                    return Err(CrdError::Format("metadata after tensor list".into()));
                }
                file.meta.push((k.to_string(), v.to_string()));
            } else {
                return Err(CrdError::Format(format!("unrecognized header line `{line}`")));
            }
        }
        let total: usize = shapes.iter().map(|(_, r, c)| r * c).sum();
        let body = &bytes[cursor..];
        if body.len() != 4 * total + 8 {
            return Err(CrdError::Corruption(format!(
                "payload is {} bytes, header implies {}",
                body.len(),
                4 * total + 8
            )));
        }
        let (payload, tail) = body.split_at(4 * total);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != fnv64(payload) {
            return Err(CrdError::Corruption(format!("{kind} checksum mismatch")));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        for (name, rows, cols) in shapes {
            let data: Vec<f32> = values.by_ref().take(rows * cols).collect();
            file.tensors.push(NamedTensor { name, rows, cols, data });
        }
        Ok(file)
    }
}
