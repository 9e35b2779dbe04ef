//! Training text: loading, batching and the plain training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crd_format::MAGIC;
use crate::error::{CrdError, Result};
use crate::tinyformer::{ModelParams, Optimizer, TokenSeq, Trainer};

#[derive(Debug, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum CorpusLine {
    Example {
        prompt: String,
        answer: String,
        #[serde(default)]
        #[allow(dead_code)]
        id: Option<String>,
    },
    Text {
        text: String,
    },
}

/// Parses a training corpus: one JSON object per line, either
/// `{"prompt", "answer"}` (optionally with `id`) or `{"text"}`.
///
/// Released containers are refused outright; they hold no token sequence.
pub fn corpus_from_bytes(bytes: &[u8]) -> Result<Vec<TokenSeq>> {
    if bytes.starts_with(MAGIC) {
        return Err(CrdError::Format(
            "input is a released benchmark container, which holds no trainable token sequences".into(),
        ));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| CrdError::Format(format!("corpus is not UTF-8: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(line).map_err(|e| CrdError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(match parsed {
            CorpusLine::Example { prompt, answer, .. } => TokenSeq::example(&prompt, &answer),
            CorpusLine::Text { text } => {
                let mut seq = TokenSeq::prompt(&text);
                seq.push(crate::tinyformer::EOS);
                seq
            }
        });
    }
    if out.is_empty() {
        return Err(CrdError::Empty("corpus has no lines".into()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<TokenSeq>> {
    corpus_from_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub clip_norm: Option<f64>,
    /// Seeds batch sampling; model init has its own seed in the model config.
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            learning_rate: 3e-3,
            optimizer: Optimizer::adam(),
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

/// Runs `spec.steps` optimizer steps on batches produced by `next_batch`
/// (called with the step index). Returns the loss of every step.
pub fn fit(
    params: &mut ModelParams<f32>,
    spec: &TrainSpec,
    mut next_batch: impl FnMut(usize) -> Vec<TokenSeq>,
) -> Result<Vec<f32>> {
    let mut trainer = Trainer::new(params, spec.optimizer);
    trainer.clip_norm = spec.clip_norm;
    (0..spec.steps)
        .map(|step| trainer.step(params, &next_batch(step), spec.learning_rate))
        .collect()
}

/// Epoch-wise shuffled batches over `corpus`.
pub struct Batcher<'a> {
    corpus: &'a [TokenSeq],
    order: Vec<usize>,
    at: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a [TokenSeq], seed: u64) -> Self {
        let mut b = Self {
            corpus,
            order: (0..corpus.len()).collect(),
            at: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<TokenSeq> {
        (0..size)
            .map(|_| {
                if self.at == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.at = 0;
                }
                self.at += 1;
                self.corpus[self.order[self.at - 1]].clone()
            })
            .collect()
    }
}

pub fn train_on_corpus(params: &mut ModelParams<f32>, corpus: &[TokenSeq], spec: &TrainSpec) -> Result<Vec<f32>> {
    if corpus.is_empty() {
        return Err(CrdError::Empty("corpus has no sequences".into()));
    }
    let mut batcher = Batcher::new(corpus, spec.seed);
    fit(params, spec, |_| batcher.next_batch(spec.batch_size))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_line_shapes() {
        let text = b"{\"prompt\":\"a=\",\"answer\":\"1\"}\n{\"text\":\"hi\"}\n";
        let c = corpus_from_bytes(text).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0], TokenSeq::example("a=", "1"));
        assert_eq!(c[1].len(), 4);
    }

    #[test]
    fn refuses_containers() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(b"{\"text\":\"hi\"}");
        assert!(matches!(corpus_from_bytes(&bytes), Err(CrdError::Format(_))));
    }

    #[test]
    fn batcher_visits_everything_each_epoch() {
        let corpus: Vec<TokenSeq> = (0..5).map(|i| TokenSeq::prompt(&i.to_string())).collect();
        let mut b = Batcher::new(&corpus, 1);
        let mut seen = b.next_batch(5);
        seen.sort_by_key(|s| s.ids().to_vec());
        assert_eq!(seen, corpus);
    }
}
