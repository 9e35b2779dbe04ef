//! Turns a plaintext benchmark into a released container plus datacard.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crd_format::{
    compress_cache, AnchorInfo, CacheScoring, CalibrationSample, CompressionInfo, CrdFile, CrdRecord, Datacard,
    DType,
};
use crate::error::{CrdError, Result};
use crate::tinyformer::{Model, TokenSeq};

pub const DEFAULT_SCORER: &str = "normalized_exact_match";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkItem {
    pub id: String,
    pub prompt: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl BenchmarkItem {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            answer: answer.into(),
            metadata: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlainBenchmark {
    pub task: String,
    pub scoring_rule: String,
    pub items: Vec<BenchmarkItem>,
}

impl PlainBenchmark {
    /// Validates unique ids and non-empty prompts.
    pub fn new(task: impl Into<String>, items: Vec<BenchmarkItem>) -> Result<Self> {
        let mut seen = HashSet::new();
        for item in &items {
            if item.prompt.is_empty() {
                return Err(CrdError::Validation(format!("item `{}` has an empty prompt", item.id)));
            }
            if !seen.insert(item.id.as_str()) {
                return Err(CrdError::Validation(format!("duplicate id `{}`", item.id)));
            }
        }
        Ok(Self {
            task: task.into(),
            scoring_rule: DEFAULT_SCORER.into(),
            items,
        })
    }

    /// Parses one JSON object per line (`id`, `prompt`, `answer`, optional `metadata`).
    pub fn from_jsonl(text: &str, task: impl Into<String>) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let item: BenchmarkItem = serde_json::from_str(line).map_err(|e| CrdError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            items.push(item);
        }
        Self::new(task, items)
    }

    pub fn to_jsonl(&self) -> String {
        self.items
            .iter()
            .map(|it| serde_json::to_string(it).expect("plain struct") + "\n")
            .collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BenchmarkItem> {
        self.items.iter().find(|it| it.id == id)
    }
}

/// Reads a line-delimited benchmark; the task name defaults to the file stem.
pub fn load_benchmark(path: &Path) -> Result<PlainBenchmark> {
    let text = std::fs::read_to_string(path)?;
    let task = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "benchmark".into());
    PlainBenchmark::from_jsonl(&text, task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationOptions {
    pub dataset: String,
    pub dtype: DType,
    pub retain_fraction: f64,
    /// How positions are ranked for eviction when `retain_fraction < 1`.
    pub scoring: CacheScoring,
    /// Items moved to the datacard as plaintext calibration samples.
    pub calibration_size: usize,
    /// Context kept free for generation; prompts longer than `T_max − reserve` are skipped.
    pub reserve: usize,
    pub seed: u64,
}

impl Default for CurationOptions {
    fn default() -> Self {
        Self {
            dataset: "benchmark".into(),
            dtype: DType::F32,
            retain_fraction: 1.0,
            scoring: CacheScoring::FinalQuery,
            calibration_size: 16,
            reserve: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub total_items: usize,
    pub records: usize,
    pub calibration: usize,
    pub skipped: Vec<SkippedItem>,
}

#[derive(Debug, Clone)]
pub struct Curation {
    pub file: CrdFile,
    pub datacard: Datacard,
    pub report: CurationReport,
}

/// Projects every non-calibration prompt through `anchor` and packages the
/// result. Over-length prompts are skipped and reported, not fatal.
pub fn curate(benchmark: &PlainBenchmark, anchor: &Model, options: &CurationOptions) -> Result<Curation> {
    let n = benchmark.items.len();
    if options.calibration_size >= n {
        return Err(CrdError::Parameter(format!(
            "calibration size {} must be smaller than the item count {n}",
            options.calibration_size
        )));
    }
    if !(options.retain_fraction > 0.0 && options.retain_fraction <= 1.0) {
        return Err(CrdError::Parameter(format!(
            "retain fraction must be in (0, 1], got {}",
            options.retain_fraction
        )));
    }
    let cfg = anchor.config();
    let limit = cfg.max_context.saturating_sub(options.reserve);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut calib_idx = sample(&mut rng, n, options.calibration_size).into_vec();
    calib_idx.sort_unstable();
    let is_calib: HashSet<usize> = calib_idx.iter().copied().collect();

    let scored: Vec<&BenchmarkItem> = (0..n)
        .filter(|i| !is_calib.contains(i))
        .map(|i| &benchmark.items[i])
        .collect();
    let outcomes: Vec<std::result::Result<CrdRecord, SkippedItem>> = scored
        .par_iter()
        .map(|item| {
            let prompt = TokenSeq::prompt(&item.prompt);
            if prompt.len() > limit {
                return Err(SkippedItem {
                    id: item.id.clone(),
                    reason: format!("prompt is {} tokens, limit is {limit}", prompt.len()),
                });
            }
            encode_item(anchor, item, &prompt, options).map_err(|e| SkippedItem {
                id: item.id.clone(),
                reason: e.to_string(),
            })
        })
        .collect();

    let mut file = CrdFile::new(anchor.fingerprint());
    let mut skipped = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => file.records.push(r),
            Err(s) => skipped.push(s),
        }
    }
    let samples = calib_idx
        .iter()
        .map(|&i| {
            let it = &benchmark.items[i];
            CalibrationSample {
                id: it.id.clone(),
                prompt: it.prompt.clone(),
                answer: it.answer.clone(),
            }
        })
        .collect::<Vec<_>>();
    let datacard = Datacard {
        created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        dataset: options.dataset.clone(),
        task: benchmark.task.clone(),
        scoring_rule: benchmark.scoring_rule.clone(),
        dtype: options.dtype,
        record_count: file.len(),
        anchor: AnchorInfo {
            fingerprint: anchor.fingerprint(),
            pos_encoding: cfg.pos_encoding,
            config: cfg.clone(),
        },
        compression: CompressionInfo {
            retain_fraction: options.retain_fraction,
            scoring_rule: options.scoring.as_str().into(),
        },
        samples,
    };
    let report = CurationReport {
        total_items: n,
        records: file.len(),
        calibration: calib_idx.len(),
        skipped,
    };
    Ok(Curation { file, datacard, report })
}

fn encode_item(anchor: &Model, item: &BenchmarkItem, prompt: &TokenSeq, options: &CurationOptions) -> Result<CrdRecord> {
    let params = anchor.params();
    let (cache, h) = if options.retain_fraction < 1.0 {
        let (cache, h, scores) = params.prefill_with_scores(prompt, options.scoring)?;
        (compress_cache(&cache, options.retain_fraction, &scores)?, h)
    } else {
        params.prefill(prompt)?
    };
    Ok(CrdRecord::from_release(item.id.clone(), &cache, &h, item.answer.clone(), options.dtype))
}
