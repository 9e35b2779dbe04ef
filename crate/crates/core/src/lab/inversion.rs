//! Attacks that try to read prompt tokens back out of released caches.
//!
//! The attacker-side functions take only released records, model weights and
//! data the attacker generates; ground truth enters in [`inversion_probe`]
//! after predictions are fixed.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{train_on_corpus, TrainSpec};
use crate::crd_format::{CrdFile, CrdRecord, DType};
use crate::curation::{curate, CurationOptions};
use crate::error::{CrdError, Result};
use crate::lab::tasks::{lookup_benchmark, lookup_corpus};
use crate::linalg::{from_f32_rows, pinv};
use crate::tinyformer::{
    Fingerprint, KVCache, LayerCache, Model, ModelConfig, ModelParams, NormKind, PenultimateState, PosEncoding,
    RopePhase, TokenSeq,
};
use crate::translation::AnchorSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    /// Least-squares inversion of the layer's projection, then the nearest
    /// token embedding by cosine.
    NearestEmbedding,
    /// Linear classifier from cache rows to tokens, fitted on prompts the
    /// attacker generates and runs through the model.
    LearnedInverter,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::NearestEmbedding => "nearest_embedding",
            AttackKind::LearnedInverter => "learned_inverter",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Keys,
    Values,
}

pub const MAX_BUDGET: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub attack: AttackKind,
    pub family: Family,
    pub layer: usize,
    /// Attacker-generated prompts for the learned inverter.
    pub budget: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            attack: AttackKind::NearestEmbedding,
            family: Family::Keys,
            layer: 0,
            budget: 256,
            seed: 0,
        }
    }
}

impl AttackConfig {
    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(CrdError::Parameter(format!(
                "layer {} out of range for a {}-layer model",
                self.layer, cfg.n_layers
            )));
        }
        if self.budget == 0 || self.budget > MAX_BUDGET {
            return Err(CrdError::Parameter(format!("budget must be in 1..={MAX_BUDGET}")));
        }
        Ok(())
    }
}

/// What the attacker claims for one record: `(position, token)` guesses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recovery {
    pub id: String,
    pub guesses: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub label: String,
    pub attack: AttackKind,
    pub family: Family,
    pub layer: usize,
    pub model: Fingerprint,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub probed: usize,
    pub recovered: usize,
    pub rate: f64,
    pub chance: f64,
    pub notes: Vec<String>,
}

/// Row `j` of `layer`'s chosen family at its original position, with the
/// positional rotation undone for rotary keys.
fn rows_of(cfg: &ModelConfig, layer: &LayerCache<f32>, family: Family) -> Vec<(u32, Vec<f64>)> {
    let kv = cfg.kv_dim();
    let data = match family {
        Family::Keys => &layer.keys,
        Family::Values => &layer.values,
    };
    layer
        .positions
        .iter()
        .zip(data.chunks_exact(kv))
        .map(|(&pos, row)| {
            let mut row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            if family == Family::Keys && cfg.pos_encoding == PosEncoding::Rotary {
                RopePhase::<f64>::new(pos as usize, cfg.d_head()).apply_inverse(&mut row, cfg.d_head());
            }
            (pos, row)
        })
        .collect()
}

fn projection(p: &ModelParams<f32>, layer: usize, family: Family) -> (DMatrix<f64>, DVector<f64>) {
    let cfg = &p.config;
    let lp = &p.layers[layer];
    let w = match family {
        Family::Keys => &lp.wk,
        Family::Values => &lp.wv,
    };
    let mut m = from_f32_rows(cfg.d_model, cfg.kv_dim(), w);
    let offset = match lp.attn_norm.bias.is_empty() {
        true => DVector::zeros(cfg.kv_dim()),
        false => {
            let b = DVector::from_iterator(cfg.d_model, lp.attn_norm.bias.iter().map(|&v| v as f64));
            (b.transpose() * &m).transpose()
        }
    };
    for (r, &g) in lp.attn_norm.gain.iter().enumerate() {
        m.row_mut(r).scale_mut(g as f64);
    }
    (m, offset)
}

/// Embedding-table candidates as the normalized first-layer input would see
/// them: centered for layer norm, unit length.
fn candidates(p: &ModelParams<f32>, pos: Option<usize>) -> DMatrix<f64> {
    let cfg = &p.config;
    let d = cfg.d_model;
    let mut c = from_f32_rows(cfg.vocab_size, d, &p.tok_embed);
    if let Some(pos) = pos {
        for v in 0..cfg.vocab_size {
            for i in 0..d {
                c[(v, i)] += p.pos_embed[pos * d + i] as f64;
            }
        }
    }
    for mut row in c.row_iter_mut() {
        if cfg.norm == NormKind::Layer {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    c
}

fn argmax_cosine(x: &DVector<f64>, table: &DMatrix<f64>) -> u32 {
    let scores = table * x;
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best as u32
}

fn nearest_embedding(records: &[(String, KVCache<f32>)], model: &Model, attack: &AttackConfig, notes: &mut Vec<String>) -> Vec<Recovery> {
    let p = model.params();
    let cfg = model.config();
    let (w, offset) = projection(p, attack.layer, attack.family);
    let (w_pinv, rank) = pinv(&w);
    if rank < cfg.d_model.min(cfg.kv_dim()) {
        notes.push(format!(
            "projection is rank-deficient ({rank} of {}); inverted with the pseudo-inverse",
            cfg.d_model.min(cfg.kv_dim())
        ));
    }
    if rank < cfg.d_model {
        notes.push(format!(
            "only a {rank}-dimensional slice of the {}-dimensional input is observable",
            cfg.d_model
        ));
    }
    // Compare inside the observable subspace so that candidates are scored on
    // the same projection as the estimate.
    let observe = &w * &w_pinv;
    let project = |c: DMatrix<f64>| {
        let mut m = c * &observe;
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        m
    };
    let shared_table = match cfg.pos_encoding {
        PosEncoding::Rotary => Some(project(candidates(p, None))),
        PosEncoding::LearnedAbsolute => None,
    };
    let mut pos_tables: HashMap<u32, DMatrix<f64>> = HashMap::new();
    records
        .iter()
        .map(|(id, cache)| {
            let guesses = rows_of(cfg, cache.layer(attack.layer), attack.family)
                .into_iter()
                .filter(|&(pos, _)| pos > 0)
                .map(|(pos, row)| {
                    let r = DVector::from_vec(row) - &offset;
                    let x = (r.transpose() * &w_pinv).transpose();
                    let table = match &shared_table {
                        Some(t) => t,
                        None => pos_tables
                            .entry(pos)
                            .or_insert_with(|| project(candidates(p, Some(pos as usize)))),
                    };
                    (pos, argmax_cosine(&x, table))
                })
                .collect();
            Recovery { id: id.clone(), guesses }
        })
        .collect()
}

fn learned_inverter(records: &[(String, KVCache<f32>)], model: &Model, attack: &AttackConfig, notes: &mut Vec<String>) -> Result<Vec<Recovery>> {
    let cfg = model.config();
    let limit = cfg.max_context.min(33);
    let prompts: Vec<TokenSeq> = AnchorSet::synthetic(attack.budget, attack.seed ^ 0xa77ac)
        .prompts
        .iter()
        .map(|s| TokenSeq::prompt(&s[..s.len().min(limit - 1)]))
        .collect();
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<u32> = Vec::new();
    let width = cfg.kv_dim() + 1;
    for prompt in &prompts {
        let (cache, _) = model.params().prefill(prompt)?;
        for (pos, row) in rows_of(cfg, cache.layer(attack.layer), attack.family) {
            if pos == 0 {
                continue;
            }
            xs.extend(row);
            xs.push(1.0);
            ys.push(prompt.ids()[pos as usize]);
        }
    }
    let n = ys.len();
    let x = DMatrix::from_row_slice(n, width, &xs);
    let mut y = DMatrix::<f64>::zeros(n, cfg.vocab_size);
    for (i, &t) in ys.iter().enumerate() {
        y[(i, t as usize)] = 1.0;
    }
    let xtx = x.transpose() * &x;
    let ridge = 1e-6 * xtx.trace() / width as f64;
    let w = (xtx + DMatrix::identity(width, width) * ridge)
        .cholesky()
        .ok_or_else(|| CrdError::Parameter("inverter normal equations are not positive definite".into()))?
        .solve(&(x.transpose() * y));
    notes.push(format!("inverter fitted on {n} rows from {} attacker prompts", prompts.len()));
    Ok(records
        .iter()
        .map(|(id, cache)| {
            let guesses = rows_of(cfg, cache.layer(attack.layer), attack.family)
                .into_iter()
                .filter(|&(pos, _)| pos > 0)
                .map(|(pos, mut row)| {
                    row.push(1.0);
                    let scores = DVector::from_vec(row).transpose() * &w;
                    (pos, scores.transpose().argmax().0 as u32)
                })
                .collect();
            Recovery { id: id.clone(), guesses }
        })
        .collect())
}

/// Runs `attack` against every record. Sees only the release and the model.
pub fn attack_file(file: &CrdFile, model: &Model, attack: &AttackConfig) -> Result<(Vec<Recovery>, Vec<String>)> {
    attack.check(model.config())?;
    let records = file
        .records
        .iter()
        .map(|r| Ok((r.id.clone(), r.to_release()?.0)))
        .collect::<Result<Vec<_>>>()?;
    let mut notes = Vec::new();
    let recoveries = match attack.attack {
        AttackKind::NearestEmbedding => nearest_embedding(&records, model, attack, &mut notes),
        AttackKind::LearnedInverter => learned_inverter(&records, model, attack, &mut notes)?,
    };
    Ok((recoveries, notes))
}

/// Attacks `file`, then scores the guesses against `ground_truth`
/// (`id → prompt text`): the fraction of probed positions whose token was
/// recovered exactly. The BOS position is never probed.
pub fn inversion_probe(
    file: &CrdFile,
    model: &Model,
    attack: &AttackConfig,
    ground_truth: &HashMap<String, String>,
    label: &str,
) -> Result<InversionReport> {
    let (recoveries, notes) = attack_file(file, model, attack)?;
    let (mut probed, mut recovered) = (0, 0);
    for r in &recoveries {
        let truth = ground_truth
            .get(&r.id)
            .ok_or_else(|| CrdError::Validation(format!("no ground truth for `{}`", r.id)))?;
        let truth = TokenSeq::prompt(truth);
        for &(pos, tok) in &r.guesses {
            probed += 1;
            recovered += usize::from(truth.ids().get(pos as usize) == Some(&tok));
        }
    }
    let cfg = model.config();
    Ok(InversionReport {
        label: label.to_string(),
        attack: attack.attack,
        family: attack.family,
        layer: attack.layer,
        model: model.fingerprint(),
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        probed,
        recovered,
        rate: if probed == 0 { 0.0 } else { recovered as f64 / probed as f64 },
        chance: 1.0 / cfg.vocab_size as f64,
        notes,
    })
}

/// Same shapes, ids, positions and per-tensor scale as `like`, but every
/// activation is Gaussian noise that no prompt produced.
pub fn noise_file(like: &CrdFile, seed: u64) -> Result<CrdFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = |xs: &[f32]| -> Vec<f32> {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
        let sd = (xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-6);
        let dist = Normal::new(mean, sd).expect("positive sd");
        xs.iter().map(|_| dist.sample(&mut rng) as f32).collect()
    };
    let records = like
        .records
        .iter()
        .map(|r| {
            let (cache, h) = r.to_release()?;
            let layers = cache
                .layers()
                .iter()
                .map(|l| LayerCache {
                    keys: noise(&l.keys),
                    values: noise(&l.values),
                    positions: l.positions.clone(),
                })
                .collect();
            let cache = KVCache::from_parts(layers, cache.prompt_len(), cache.n_kv_heads(), cache.d_head())?;
            let h = PenultimateState::new(noise(&h.h));
            Ok(CrdRecord::from_release(r.id.clone(), &cache, &h, r.answer.clone(), DType::F32))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrdFile {
        fingerprint: like.fingerprint,
        records,
    })
}

/// Matched multi-head and grouped-query models probed with the same attack,
/// plus a noise-cache chance baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionExperiment {
    pub attack: AttackConfig,
    /// Released lookup prompts to attack.
    pub prompts: usize,
    pub gqa_kv_heads: usize,
    /// Training on the lookup task before release; `steps = 0` probes the
    /// freshly initialized models.
    pub train: TrainSpec,
}

impl Default for InversionExperiment {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            prompts: 100,
            gqa_kv_heads: 1,
            train: TrainSpec {
                steps: 0,
                ..TrainSpec::default()
            },
        }
    }
}

impl InversionExperiment {
    pub fn run(&self, base: &ModelConfig, seed: u64) -> Result<Vec<InversionReport>> {
        let benchmark = lookup_benchmark(self.prompts, seed ^ 0x1e7);
        let truth: HashMap<String, String> = benchmark
            .items
            .iter()
            .map(|it| (it.id.clone(), it.prompt.clone()))
            .collect();
        let corpus = lookup_corpus(4000, seed ^ 0xc0);
        let options = CurationOptions {
            calibration_size: 0,
            reserve: 0,
            ..CurationOptions::default()
        };
        let mut reports = Vec::new();
        for (label, kv) in [("mha", base.n_heads), ("gqa", self.gqa_kv_heads)] {
            let cfg = ModelConfig {
                n_kv_heads: kv,
                ..base.clone()
            };
            let mut params = ModelParams::<f32>::init(&cfg)?;
            if self.train.steps > 0 {
                train_on_corpus(&mut params, &corpus, &self.train)?;
            }
            let model = Model::new(params);
            let file = curate(&benchmark, &model, &options)?.file;
            reports.push(inversion_probe(&file, &model, &self.attack, &truth, label)?);
            if label == "mha" {
                let noise = noise_file(&file, seed ^ 0x7015e)?;
                reports.push(inversion_probe(&noise, &model, &self.attack, &truth, "noise")?);
            }
        }
        Ok(reports)
    }
}
