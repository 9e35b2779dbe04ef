//! Scoring models on released files, and paired checks of the released
//! pipeline against plaintext generation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crd_format::{CrdFile, CrdRecord, DType};
use crate::curation::PlainBenchmark;
use crate::error::{CrdError, Result};
use crate::tinyformer::{detokenize, generate_with, CacheDecoder, Fingerprint, GenSettings, Model, TokenSeq};
use crate::translation::AlignmentMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    ExactMatch,
    #[default]
    NormalizedExactMatch,
    TokenF1,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::ExactMatch, Scorer::NormalizedExactMatch, Scorer::TokenF1];

    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::ExactMatch => "exact_match",
            Scorer::NormalizedExactMatch => "normalized_exact_match",
            Scorer::TokenF1 => "token_f1",
        }
    }

    /// Score of `prediction` against `reference`, in `[0, 1]`.
    pub fn score(self, prediction: &str, reference: &str) -> f64 {
        match self {
            Scorer::ExactMatch => f64::from(u8::from(prediction == reference)),
            Scorer::NormalizedExactMatch => f64::from(u8::from(normalize(prediction) == normalize(reference))),
            Scorer::TokenF1 => token_f1(prediction, reference),
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scorer {
    type Err = CrdError;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| CrdError::Parameter(format!("unknown scorer `{s}`")))
    }
}

/// Lowercases and collapses whitespace runs to single spaces, trimmed.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p = normalize(prediction);
    let r = normalize(reference);
    let (p, r): (Vec<&str>, Vec<&str>) = (p.split(' ').filter(|t| !t.is_empty()).collect(), r.split(' ').filter(|t| !t.is_empty()).collect());
    if p.is_empty() || r.is_empty() {
        return f64::from(u8::from(p.is_empty() && r.is_empty()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / r.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Generated text up to the first EOS, whitespace-trimmed.
pub fn extract_answer(generated: &[u32]) -> String {
    detokenize(generated).trim().to_string()
}

/// A cache-resumed decoder that can state which weights it runs.
pub trait Evaluable: CacheDecoder<f32> {
    fn fingerprint(&self) -> Fingerprint;
}

impl Evaluable for Model {
    fn fingerprint(&self) -> Fingerprint {
        Model::fingerprint(self)
    }
}

/// Caps `max_new` at what the context window still allows after `prompt_len`
/// tokens: the first token needs no slot, every later one needs one.
pub fn fit_to_context(settings: &GenSettings, prompt_len: usize, max_context: usize) -> GenSettings {
    let room = max_context.saturating_sub(prompt_len) + 1;
    GenSettings {
        max_new: settings.max_new.min(room),
        ..settings.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub generated: String,
    pub answer: String,
    pub score: f64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub items_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: Fingerprint,
    pub map: Option<Fingerprint>,
    pub scorer: Scorer,
    pub settings: GenSettings,
    pub items: Vec<ItemResult>,
    pub accuracy: f64,
    /// Kept apart from the results so reruns can be compared on everything else.
    pub timing: Timing,
}

fn timing(start: Instant, n: usize) -> Timing {
    let wall_seconds = start.elapsed().as_secs_f64();
    Timing {
        wall_seconds,
        items_per_second: if wall_seconds > 0.0 { n as f64 / wall_seconds } else { 0.0 },
    }
}

fn header_line(kind: &str, t: &Timing) -> String {
    serde_json::json!({
        "report": kind,
        "created": chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        "wall_seconds": t.wall_seconds,
        "items_per_second": t.items_per_second,
    })
    .to_string()
}

impl EvalReport {
    /// Same results, ignoring timing.
    pub fn same_results(&self, other: &EvalReport) -> bool {
        EvalReport {
            timing: other.timing,
            ..self.clone()
        } == *other
    }

    /// Header line (the only one holding wall-clock values), one line per
    /// item in file order, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = header_line("evaluation", &self.timing) + "\n";
        for item in &self.items {
            out += &serde_json::to_string(item).expect("plain struct");
            out.push('\n');
        }
        out += &serde_json::json!({
            "model": self.model,
            "map": self.map,
            "scorer": self.scorer,
            "settings": self.settings,
            "items": self.items.len(),
            "accuracy": self.accuracy,
        })
        .to_string();
        out.push('\n');
        out
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {}", "model", self.model);
        if let Some(m) = self.map {
            let _ = writeln!(s, "{:<10} {}", "map", m);
        }
        let _ = writeln!(s, "{:<10} {}", "scorer", self.scorer);
        let _ = writeln!(s, "{:<10} {}", "items", self.items.len());
        let _ = writeln!(s, "{:<10} {:.4}", "accuracy", self.accuracy);
        let _ = writeln!(s, "{:<10} {:.2}s", "wall", self.timing.wall_seconds);
        s
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        0.0
    } else {
        xs.sum::<f64>() / n as f64
    }
}

fn run_record<M: Evaluable + ?Sized>(model: &M, record: &CrdRecord, settings: &GenSettings) -> Result<Vec<u32>> {
    let (mut cache, h) = record.to_release()?;
    let cfg = model.config();
    let settings = fit_to_context(settings, record.prompt_len(), cfg.max_context);
    Ok(generate_with(model, &mut cache, &h, &settings)?.into_inner())
}

/// Scores `model` on every record of `file`, translating first when the file
/// was curated by a different anchor. Only released latents reach the model.
pub fn evaluate<M: Evaluable + ?Sized>(
    file: &CrdFile,
    model: &M,
    map: Option<&AlignmentMap>,
    scorer: Scorer,
    settings: &GenSettings,
) -> Result<EvalReport> {
    if file.is_empty() {
        return Err(CrdError::Empty("file has no records".into()));
    }
    let fp = model.fingerprint();
    match map {
        None if file.fingerprint != fp => {
            return Err(CrdError::Compatibility(format!(
                "file was curated by {} but the model is {fp}; supply an alignment map",
                file.fingerprint
            )))
        }
        Some(m) if m.anchor != file.fingerprint || m.target != fp => {
            return Err(CrdError::Compatibility(format!(
                "map bridges {} -> {} but the file is {} and the model is {fp}",
                m.anchor, m.target, file.fingerprint
            )))
        }
        _ => {}
    }
    let start = Instant::now();
    let items = file
        .records
        .par_iter()
        .map(|record| {
            let tokens = match map {
                Some(m) => run_record(model, &m.translate_record(record)?, settings)?,
                None => run_record(model, record, settings)?,
            };
            let generated = extract_answer(&tokens);
            Ok(ItemResult {
                id: record.id.clone(),
                score: scorer.score(&generated, &record.answer),
                generated,
                answer: record.answer.clone(),
                tokens,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        model: fp,
        map: map.map(AlignmentMap::id),
        scorer,
        settings: settings.clone(),
        accuracy: mean(items.iter().map(|i| i.score)),
        timing: timing(start, items.len()),
        items,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedItem {
    pub id: String,
    pub plaintext: String,
    pub released: String,
    pub plaintext_tokens: Vec<u32>,
    pub released_tokens: Vec<u32>,
    pub plaintext_score: f64,
    pub released_score: f64,
    /// First generated index where the two token streams differ.
    pub first_divergence: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub model: Fingerprint,
    pub scorer: Scorer,
    pub settings: GenSettings,
    pub items: Vec<PairedItem>,
    pub agreement: f64,
    /// Fraction of items whose extracted answers match, whatever the tokens after them.
    pub answer_agreement: f64,
    /// Divergence index → number of items first diverging there.
    pub divergence_histogram: BTreeMap<usize, usize>,
    pub plaintext_accuracy: f64,
    pub released_accuracy: f64,
    /// `released_accuracy − plaintext_accuracy`.
    pub accuracy_delta: f64,
    /// Set for 32-bit, uncompressed files, where anything short of full
    /// agreement is a failure.
    pub exact_required: bool,
    pub timing: Timing,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        !self.exact_required || self.agreement == 1.0
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = header_line("equivalence", &self.timing) + "\n";
        for item in &self.items {
            out += &serde_json::to_string(item).expect("plain struct");
            out.push('\n');
        }
        out += &serde_json::json!({
            "model": self.model,
            "scorer": self.scorer,
            "settings": self.settings,
            "items": self.items.len(),
            "agreement": self.agreement,
            "answer_agreement": self.answer_agreement,
            "divergence_histogram": self.divergence_histogram,
            "plaintext_accuracy": self.plaintext_accuracy,
            "released_accuracy": self.released_accuracy,
            "accuracy_delta": self.accuracy_delta,
            "exact_required": self.exact_required,
            "passed": self.passed(),
        })
        .to_string();
        out.push('\n');
        out
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {}", "model", self.model);
        let _ = writeln!(s, "{:<20} {}", "items", self.items.len());
        let _ = writeln!(s, "{:<20} {:.4}", "agreement", self.agreement);
        let _ = writeln!(s, "{:<20} {:.4}", "answer agreement", self.answer_agreement);
        let _ = writeln!(s, "{:<20} {:.4}", "plaintext accuracy", self.plaintext_accuracy);
        let _ = writeln!(s, "{:<20} {:.4}", "released accuracy", self.released_accuracy);
        let _ = writeln!(s, "{:<20} {:+.4}", "delta", self.accuracy_delta);
        for (idx, n) in &self.divergence_histogram {
            let _ = writeln!(s, "{:<20} {n}", format!("diverge@{idx}"));
        }
        let verdict = match (self.exact_required, self.passed()) {
            (false, _) => "not gated",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        let _ = writeln!(s, "{:<20} {verdict}", "exact gate");
        s
    }
}

fn first_divergence(a: &[u32], b: &[u32]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

/// Runs every record of `file` through `anchor` twice: once from the released
/// latents and once by plain generation over the benchmark prompt with the
/// same id, recomputing the full sequence at every step.
pub fn verify_equivalence(
    benchmark: &PlainBenchmark,
    file: &CrdFile,
    anchor: &Model,
    scorer: Scorer,
    settings: &GenSettings,
) -> Result<EquivalenceReport> {
    if benchmark.is_empty() {
        return Err(CrdError::Empty("benchmark has no items".into()));
    }
    if file.is_empty() {
        return Err(CrdError::Empty("file has no records".into()));
    }
    if file.fingerprint != anchor.fingerprint() {
        return Err(CrdError::Compatibility(format!(
            "file was curated by {}, not by {}",
            file.fingerprint,
            anchor.fingerprint()
        )));
    }
    let index: std::collections::HashMap<&str, &crate::curation::BenchmarkItem> =
        benchmark.items.iter().map(|it| (it.id.as_str(), it)).collect();
    let pairs = file
        .records
        .iter()
        .map(|r| match index.get(r.id.as_str()) {
            Some(item) if item.answer == r.answer => Ok((r, *item)),
            Some(_) => Err(CrdError::Validation(format!("answer for `{}` differs from the benchmark", r.id))),
            None => Err(CrdError::Validation(format!("record `{}` is not in the benchmark", r.id))),
        })
        .collect::<Result<Vec<_>>>()?;

    let start = Instant::now();
    let cfg = anchor.config();
    let items = pairs
        .par_iter()
        .map(|(record, item)| {
            let released_tokens = run_record(anchor, record, settings)?;
            let prompt = TokenSeq::prompt(&item.prompt);
            let plain_settings = fit_to_context(settings, prompt.len(), cfg.max_context);
            let plaintext_tokens = anchor.params().generate_uncached(&prompt, &plain_settings)?.into_inner();
            let plaintext = extract_answer(&plaintext_tokens);
            let released = extract_answer(&released_tokens);
            Ok(PairedItem {
                id: record.id.clone(),
                plaintext_score: scorer.score(&plaintext, &item.answer),
                released_score: scorer.score(&released, &item.answer),
                first_divergence: first_divergence(&plaintext_tokens, &released_tokens),
                plaintext,
                released,
                plaintext_tokens,
                released_tokens,
            })
        })
        .collect::<Result<Vec<PairedItem>>>()?;

    let mut divergence_histogram = BTreeMap::new();
    for i in items.iter().filter_map(|i| i.first_divergence) {
        *divergence_histogram.entry(i).or_insert(0) += 1;
    }
    let plaintext_accuracy = mean(items.iter().map(|i| i.plaintext_score));
    let released_accuracy = mean(items.iter().map(|i| i.released_score));
    let exact_required = file
        .records
        .iter()
        .all(|r| r.dtype() == DType::F32 && r.cache.layers.iter().all(|l| l.positions.len() == r.prompt_len()));
    Ok(EquivalenceReport {
        model: anchor.fingerprint(),
        scorer,
        settings: settings.clone(),
        agreement: mean(items.iter().map(|i| f64::from(u8::from(i.first_divergence.is_none())))),
        answer_agreement: mean(items.iter().map(|i| f64::from(u8::from(i.plaintext == i.released)))),
        divergence_histogram,
        plaintext_accuracy,
        released_accuracy,
        accuracy_delta: released_accuracy - plaintext_accuracy,
        exact_required,
        timing: timing(start, items.len()),
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scorers() {
        assert_eq!(Scorer::ExactMatch.score("42", "42"), 1.0);
        assert_eq!(Scorer::ExactMatch.score("42", "43"), 0.0);
        assert_eq!(Scorer::ExactMatch.score("Paris ", "Paris"), 0.0);
        assert_eq!(Scorer::NormalizedExactMatch.score("  PARIS\t", "paris"), 1.0);
        assert_eq!(Scorer::TokenF1.score("the cat sat", "the cat"), 0.8);
        assert_eq!(Scorer::TokenF1.score("", ""), 1.0);
        assert_eq!(Scorer::TokenF1.score("x", ""), 0.0);
    }

    #[test]
    fn scorer_names_round_trip() {
        for s in Scorer::ALL {
            assert_eq!(s.as_str().parse::<Scorer>().unwrap(), s);
        }
        assert!("bleu".parse::<Scorer>().is_err());
    }

    #[test]
    fn divergence_index() {
        assert_eq!(first_divergence(&[1, 2, 3], &[1, 2, 3]), None);
        assert_eq!(first_divergence(&[1, 2, 3], &[1, 5, 3]), Some(1));
        assert_eq!(first_divergence(&[1, 2], &[1, 2, 3]), Some(2));
    }

    #[test]
    fn context_cap() {
        let s = GenSettings::greedy(16);
        assert_eq!(fit_to_context(&s, 10, 64).max_new, 16);
        assert_eq!(fit_to_context(&s, 60, 64).max_new, 5);
        assert_eq!(fit_to_context(&s, 64, 64).max_new, 1);
    }
}
