use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{fit, Batcher, TrainSpec};
use crate::curation::{curate, CurationOptions, PlainBenchmark};
use crate::error::{CrdError, Result};
use crate::evaluation::{evaluate, Scorer};
use crate::lab::inversion::{InversionExperiment, InversionReport};
use crate::lab::tasks::{memorization_benchmark, memorization_corpus};
use crate::tinyformer::{nll_loss, GenSettings, Model, ModelConfig, ModelParams, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContaminationMode {
    /// Corpus only.
    None,
    /// Benchmark prompt+answer pairs injected into training batches.
    Plaintext,
    /// The released container's bytes injected as if they were text.
    CrdPayload,
}

impl fmt::Display for ContaminationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContaminationMode::None => "clean",
            ContaminationMode::Plaintext => "plaintext",
            ContaminationMode::CrdPayload => "crd_payload",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub corpus_size: usize,
    pub held_out_size: usize,
    pub benchmark_size: usize,
    pub key_len: usize,
    pub value_len: usize,
    /// Batch slots that contaminated arms fill with injected sequences.
    pub injected_per_batch: usize,
    pub arms: Vec<ContaminationMode>,
    pub trials: usize,
    pub seed: u64,
    pub eval: GenSettings,
    pub scorer: Scorer,
    pub inversion: Option<InversionExperiment>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_layers: 2,
                d_model: 48,
                n_heads: 4,
                n_kv_heads: 2,
                max_context: 24,
                ..ModelConfig::default()
            },
            train: TrainSpec {
                steps: 600,
                batch_size: 16,
                learning_rate: 5e-3,
                ..TrainSpec::default()
            },
            corpus_size: 2000,
            held_out_size: 200,
            benchmark_size: 32,
            key_len: 3,
            value_len: 2,
            injected_per_batch: 4,
            arms: vec![
                ContaminationMode::None,
                ContaminationMode::Plaintext,
                ContaminationMode::CrdPayload,
            ],
            trials: 3,
            seed: 0,
            eval: GenSettings::greedy(4),
            scorer: Scorer::ExactMatch,
            inversion: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.trials < 3 {
            return Err(CrdError::Config(format!("at least 3 trials are needed, got {}", self.trials)));
        }
        if !self.arms.contains(&ContaminationMode::None) {
            return Err(CrdError::Config("the clean arm is required as the reference".into()));
        }
        if self.injected_per_batch > self.train.batch_size {
            return Err(CrdError::Config("more injected slots than batch slots".into()));
        }
        if self.benchmark_size == 0 || self.corpus_size == 0 || self.held_out_size == 0 {
            return Err(CrdError::Config("benchmark, corpus and held-out sizes must be positive".into()));
        }
        Ok(())
    }

    fn trial_seed(&self, trial: usize) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial as u64 + 1)
    }
}

/// Outcome of one arm in one trial; `None` fields mean training diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub held_out_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mode: ContaminationMode,
    pub trials: Vec<TrialOutcome>,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_held_out_loss: f64,
}

/// Paired per-trial differences of one arm against the clean arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub mode: ContaminationMode,
    pub differences: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of the paired differences.
    pub sd: f64,
    /// `mean > 2·sd` and `mean > 0`.
    pub exceeds: bool,
    /// `|mean| ≤ 2·sd`.
    pub indistinguishable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabReport {
    pub note: String,
    pub arms: Vec<ArmSummary>,
    pub deltas: Vec<ArmDelta>,
    pub attacks: Vec<InversionReport>,
}

pub const SCOPE_NOTE: &str = "Tests standard next-token training on a synthetic memorization task with a \
finite budget; it cannot establish that no training procedure or loss could learn from the released form.";

/// Sample mean and standard deviation (`n − 1` denominator; 0 when `n < 2`).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl LabReport {
    pub fn arm(&self, mode: ContaminationMode) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.mode == mode)
    }

    pub fn delta(&self, mode: ContaminationMode) -> Option<&ArmDelta> {
        self.deltas.iter().find(|d| d.mode == mode)
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!("# {}\n", self.note);
        let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>12}", "arm", "accuracy", "sd", "held-out nll");
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{:<12} {:>9.4} {:>9.4} {:>12.4}",
                a.mode.to_string(),
                a.mean_accuracy,
                a.sd_accuracy,
                a.mean_held_out_loss
            );
        }
        for d in &self.deltas {
            let verdict = match (d.exceeds, d.indistinguishable) {
                (true, _) => "exceeds 2sd",
                (false, true) => "within 2sd",
                _ => "inconclusive",
            };
            let _ = writeln!(
                s,
                "{:<12} delta {:+.4} ± {:.4}  {verdict}",
                d.mode.to_string(),
                d.mean,
                d.sd
            );
        }
        for r in &self.attacks {
            let _ = writeln!(
                s,
                "attack {} on {} kv heads ({}): {:.4} recovered (chance {:.4})",
                r.attack, r.n_kv_heads, r.label, r.rate, r.chance
            );
        }
        s
    }
}

struct Shared {
    benchmark: PlainBenchmark,
    corpus: Vec<TokenSeq>,
    held_out: Vec<TokenSeq>,
}

fn held_out_loss(params: &ModelParams<f32>, held_out: &[TokenSeq]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in held_out {
        total += nll_loss(&params.forward_train(seq)?, seq)? as f64;
        count += seq.len() - 1;
    }
    Ok(total / count as f64)
}

/// Scores a model on the benchmark the way a consumer would: curated by that
/// model, then evaluated from the released latents.
fn benchmark_accuracy(model: &Model, benchmark: &PlainBenchmark, config: &ExperimentConfig) -> Result<f64> {
    let options = CurationOptions {
        calibration_size: 0,
        reserve: config.eval.max_new,
        ..CurationOptions::default()
    };
    let curated = curate(benchmark, model, &options)?;
    Ok(evaluate(&curated.file, model, None, config.scorer, &config.eval)?.accuracy)
}

fn injected_sequences(
    mode: ContaminationMode,
    initial: &Model,
    shared: &Shared,
    config: &ExperimentConfig,
) -> Result<Vec<TokenSeq>> {
    let plain: Vec<TokenSeq> = shared
        .benchmark
        .items
        .iter()
        .map(|it| TokenSeq::example(&it.prompt, &it.answer))
        .collect();
    match mode {
        ContaminationMode::None => Ok(Vec::new()),
        ContaminationMode::Plaintext => Ok(plain),
        ContaminationMode::CrdPayload => {
            let options = CurationOptions {
                calibration_size: 0,
                reserve: config.eval.max_new,
                ..CurationOptions::default()
            };
            let bytes = curate(&shared.benchmark, initial, &options)?.file.to_bytes()?;
            let chunk = (plain.iter().map(|s| s.len() - 1).sum::<usize>() / plain.len()).max(1);
            Ok(bytes.chunks(chunk).map(TokenSeq::from_raw_bytes).collect())
        }
    }
}

fn run_arm(mode: ContaminationMode, trial: usize, shared: &Shared, config: &ExperimentConfig) -> TrialOutcome {
    let seed = config.trial_seed(trial);
    let outcome = (|| -> Result<(f64, f64)> {
        let cfg = ModelConfig {
            seed,
            ..config.model.clone()
        };
        let mut params = ModelParams::<f32>::init(&cfg)?;
        let initial = Model::new(params.clone());
        let mut injected = injected_sequences(mode, &initial, shared, config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        injected.shuffle(&mut rng);
        let mut batcher = Batcher::new(&shared.corpus, seed);
        let spec = TrainSpec {
            seed,
            ..config.train.clone()
        };
        let mut next = 0usize;
        fit(&mut params, &spec, |_| {
            let mut batch = batcher.next_batch(spec.batch_size);
            if !injected.is_empty() {
                for slot in batch.iter_mut().take(config.injected_per_batch) {
                    *slot = injected[next % injected.len()].clone();
                    next += 1;
                }
            }
            batch
        })?;
        let loss = held_out_loss(&params, &shared.held_out)?;
        let model = Model::new(params);
        Ok((benchmark_accuracy(&model, &shared.benchmark, config)?, loss))
    })();
    match outcome {
        Ok((accuracy, loss)) => TrialOutcome {
            trial,
            seed,
            accuracy: Some(accuracy),
            held_out_loss: Some(loss),
            error: None,
        },
        Err(e) => TrialOutcome {
            trial,
            seed,
            accuracy: None,
            held_out_loss: None,
            error: Some(e.to_string()),
        },
    }
}

/// Trains every arm in every trial from the same initialization and batch
/// stream, differing only in what fills the injected batch slots.
pub fn run_contamination_experiment(config: &ExperimentConfig) -> Result<LabReport> {
    config.validate()?;
    let benchmark = memorization_benchmark(config.benchmark_size, config.key_len, config.value_len, config.seed);
    let shared = Shared {
        corpus: memorization_corpus(config.corpus_size, config.key_len, config.value_len, config.seed ^ 1, &benchmark),
        held_out: memorization_corpus(config.held_out_size, config.key_len, config.value_len, config.seed ^ 2, &benchmark),
        benchmark,
    };
    let jobs: Vec<(ContaminationMode, usize)> = config
        .arms
        .iter()
        .flat_map(|&m| (0..config.trials).map(move |t| (m, t)))
        .collect();
    let outcomes: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|&(mode, trial)| run_arm(mode, trial, &shared, config))
        .collect();

    let arms: Vec<ArmSummary> = config
        .arms
        .iter()
        .enumerate()
        .map(|(i, &mode)| {
            let trials = outcomes[i * config.trials..(i + 1) * config.trials].to_vec();
            let acc: Vec<f64> = trials.iter().filter_map(|t| t.accuracy).collect();
            let loss: Vec<f64> = trials.iter().filter_map(|t| t.held_out_loss).collect();
            let (mean_accuracy, sd_accuracy) = mean_sd(&acc);
            ArmSummary {
                mode,
                trials,
                mean_accuracy,
                sd_accuracy,
                mean_held_out_loss: mean_sd(&loss).0,
            }
        })
        .collect();
    let clean = arms
        .iter()
        .find(|a| a.mode == ContaminationMode::None)
        .expect("validated");
    let deltas = arms
        .iter()
        .filter(|a| a.mode != ContaminationMode::None)
        .map(|a| {
            let differences: Vec<f64> = a
                .trials
                .iter()
                .zip(&clean.trials)
                .filter_map(|(x, c)| Some(x.accuracy? - c.accuracy?))
                .collect();
            let (mean, sd) = mean_sd(&differences);
            ArmDelta {
                mode: a.mode,
                exceeds: mean > 0.0 && mean > 2.0 * sd,
                indistinguishable: mean.abs() <= 2.0 * sd,
                differences,
                mean,
                sd,
            }
        })
        .collect();
    let attacks = match &config.inversion {
        Some(inv) => inv.run(&config.model, config.seed)?,
        None => Vec::new(),
    };
    Ok(LabReport {
        note: SCOPE_NOTE.into(),
        arms,
        deltas,
        attacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn fewer_than_three_trials_is_rejected() {
        let c = ExperimentConfig {
            trials: 2,
            ..ExperimentConfig::default()
        };
        assert!(matches!(c.validate(), Err(CrdError::Config(_))));
    }
}
