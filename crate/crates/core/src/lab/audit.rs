//! Checks that a release carries nothing a training loop could consume.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::corpus_from_bytes;
use crate::crd_format::{CrdFile, FieldKind, RECORD_FIELDS};
use crate::error::Result;
use crate::evaluation::Evaluable;
use crate::tensorfile::fnv64;
use crate::tinyformer::{CacheDecoder, Fingerprint, KVCache, ModelConfig, PenultimateState, Step, TokenSeq};

/// Field kinds a record may hold. None of them is a token sequence.
const ALLOWED_KINDS: &[FieldKind] = &[
    FieldKind::Name,
    FieldKind::Dimension,
    FieldKind::DTypeTag,
    FieldKind::RetainedPositions,
    FieldKind::Activations,
    FieldKind::QuantScales,
    FieldKind::Label,
    FieldKind::Checksum,
];

/// Prompts shorter than this are not byte-scanned; short patterns match
/// float payloads by coincidence.
pub const MIN_SCAN_BYTES: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralReport {
    pub clauses: Vec<Clause>,
}

impl StructuralReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&Clause> {
        self.clauses.iter().filter(|c| !c.passed).collect()
    }
}

fn encodings(ids: &[u32]) -> [(&'static str, Vec<u8>); 3] {
    [
        ("u8", ids.iter().map(|&t| t as u8).collect()),
        ("u16le", ids.iter().flat_map(|&t| (t as u16).to_le_bytes()).collect()),
        ("u32le", ids.iter().flat_map(|&t| t.to_le_bytes()).collect()),
    ]
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Verifies, for an encoded container and the prompts it was built from:
/// (a) the record schema has no token-sequence field,
/// (b) no prompt's token ids appear in the bytes as u8, u16 or u32 runs,
/// (c) the training corpus loader refuses the container.
pub fn structural_unlearnability_check(file_bytes: &[u8], prompts: &[String]) -> Result<StructuralReport> {
    let file = CrdFile::from_bytes(file_bytes)?;
    let mut clauses = Vec::new();

    let odd: Vec<&str> = RECORD_FIELDS
        .iter()
        .filter(|(_, k)| !ALLOWED_KINDS.contains(k))
        .map(|(n, _)| *n)
        .collect();
    let invalid: Vec<String> = file
        .records
        .iter()
        .filter_map(|r| r.validate().err().map(|e| format!("{}: {e}", r.id)))
        .collect();
    clauses.push(Clause {
        name: "schema".into(),
        passed: odd.is_empty() && invalid.is_empty(),
        detail: match (odd.is_empty(), invalid.is_empty()) {
            (true, true) => format!("{} fields, none holds token ids", RECORD_FIELDS.len()),
            _ => format!("unexpected fields {odd:?}; invalid records {invalid:?}"),
        },
    });

    let mut hits = Vec::new();
    let mut skipped = 0;
    for prompt in prompts {
        if prompt.len() < MIN_SCAN_BYTES {
            skipped += 1;
            continue;
        }
        let seq = TokenSeq::prompt(prompt);
        for (enc, pattern) in encodings(&seq.ids()[1..]) {
            if contains(file_bytes, &pattern) {
                hits.push(format!("{prompt:?} as {enc}"));
            }
        }
    }
    clauses.push(Clause {
        name: "byte_scan".into(),
        passed: hits.is_empty(),
        detail: if hits.is_empty() {
            format!(
                "{} prompts scanned in {} bytes, {skipped} too short to scan",
                prompts.len() - skipped,
                file_bytes.len()
            )
        } else {
            format!("prompt token ids found: {}", hits.join(", "))
        },
    });

    let rejected = corpus_from_bytes(file_bytes);
    clauses.push(Clause {
        name: "training_input".into(),
        passed: rejected.is_err(),
        detail: match rejected {
            Err(e) => format!("corpus loader refuses the container: {e}"),
            Ok(seqs) => format!("corpus loader accepted the container as {} sequences", seqs.len()),
        },
    });
    Ok(StructuralReport { clauses })
}

/// One call that reached the model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Resume {
        prompt_len: usize,
        retained: Vec<usize>,
        h: Vec<f32>,
    },
    Token(u32),
}

/// Wraps a decoder and logs every input it receives, grouped by the cache it
/// was decoding from.
pub struct RecordingDecoder<'a, D> {
    inner: &'a D,
    log: Mutex<BTreeMap<u64, Vec<ModelInput>>>,
}

/// Identifies a session by the last layer's key row at the final prompt
/// position, which decoding never changes.
fn cache_key(cache: &KVCache<f32>) -> u64 {
    let layer = cache.layer(cache.n_layers() - 1);
    let kv = cache.kv_dim();
    let last = cache.prompt_len().saturating_sub(1) as u32;
    let j = layer.positions.iter().position(|&p| p == last).unwrap_or(0);
    let row = layer.keys.get(j * kv..(j + 1) * kv).unwrap_or(&[]);
    let bytes: Vec<u8> = row
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .chain((cache.prompt_len() as u64).to_le_bytes())
        .collect();
    fnv64(&bytes)
}

impl<'a, D> RecordingDecoder<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    /// Every logged call, grouped per decoded cache, in call order.
    pub fn sessions(&self) -> Vec<Vec<ModelInput>> {
        self.log.lock().expect("log lock").values().cloned().collect()
    }

    /// The token stream fed to the model in each session.
    pub fn token_streams(&self) -> Vec<Vec<u32>> {
        self.sessions()
            .iter()
            .map(|s| {
                s.iter()
                    .filter_map(|i| match i {
                        ModelInput::Token(t) => Some(*t),
                        ModelInput::Resume { .. } => None,
                    })
                    .collect()
            })
            .collect()
    }
}

impl<D: CacheDecoder<f32>> CacheDecoder<f32> for RecordingDecoder<'_, D> {
    fn config(&self) -> &ModelConfig {
        self.inner.config()
    }

    fn decode_first(&self, cache: &KVCache<f32>, h: &PenultimateState<f32>) -> Result<Step<f32>> {
        let entry = ModelInput::Resume {
            prompt_len: cache.prompt_len(),
            retained: cache.layers().iter().map(|l| l.len()).collect(),
            h: h.h.clone(),
        };
        self.log
            .lock()
            .expect("log lock")
            .entry(cache_key(cache))
            .or_default()
            .push(entry);
        self.inner.decode_first(cache, h)
    }

    fn decode_step(&self, cache: &mut KVCache<f32>, prev_token: u32) -> Result<Step<f32>> {
        self.log
            .lock()
            .expect("log lock")
            .entry(cache_key(cache))
            .or_default()
            .push(ModelInput::Token(prev_token));
        self.inner.decode_step(cache, prev_token)
    }
}

impl<D: Evaluable> Evaluable for RecordingDecoder<'_, D> {
    fn fingerprint(&self) -> Fingerprint {
        self.inner.fingerprint()
    }
}
