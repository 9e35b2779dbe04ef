use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use crd_core::corpus::{load_corpus, train_on_corpus};
use crd_core::crd_format::{datacard_path, estimate_storage, CrdFile, Datacard, DType, StorageShape};
use crd_core::curation::{curate as curate_benchmark, load_benchmark};
use crd_core::evaluation::{evaluate as evaluate_file, verify_equivalence, Scorer};
use crd_core::lab::tasks::lookup_corpus;
use crd_core::lab::{attack_file, run_contamination_experiment};
use crd_core::tinyformer::{detokenize, init_model, save_checkpoint, Model};
use crd_core::translation::{default_rank, fit_relative_map, fit_subspace_alignment, AnchorSet, Paradigm};
use serde_json::json;

use crate::config::Config;
use crate::{GateFailure, Global};

fn say(g: &Global, text: impl AsRef<str>) {
    if !g.quiet {
        print!("{}", text.as_ref());
        if !text.as_ref().ends_with('\n') {
            println!();
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_file(path: &Path) -> Result<CrdFile> {
    CrdFile::read(path).with_context(|| format!("reading container {}", path.display()))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSONL corpus of {"prompt","answer"} or {"text"} lines. Without it,
    /// `data.size` generated lookup examples are used.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint file name inside the output directory.
    #[arg(long, default_value = "model.ckpt")]
    name: String,
}

pub fn train(a: &TrainArgs, c: &Config, g: &Global) -> Result<()> {
    let corpus = match &a.corpus {
        Some(p) => load_corpus(p).with_context(|| format!("loading corpus {}", p.display()))?,
        None => lookup_corpus(c.data.size, c.train.seed),
    };
    let mut params = init_model(&c.model)?;
    let losses = train_on_corpus(&mut params, &corpus, &c.train)?;
    let path = g.out.join(&a.name);
    save_checkpoint(&params, &path)?;
    let model = Model::new(params);
    let log: String = losses
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"step": i, "loss": l}).to_string() + "\n")
        .collect();
    write(&path.with_extension("losses.jsonl"), log)?;
    say(
        g,
        format!(
            "trained {} steps on {} sequences, final loss {:.4}\ncheckpoint {} ({})",
            losses.len(),
            corpus.len(),
            losses.last().copied().unwrap_or(f32::NAN),
            path.display(),
            model.fingerprint()
        ),
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    /// Plaintext benchmark JSONL with id, prompt and answer fields.
    #[arg(long)]
    benchmark: PathBuf,
    /// Anchor model checkpoint.
    #[arg(long)]
    model: PathBuf,
}

pub fn curate(a: &CurateArgs, c: &Config, g: &Global) -> Result<()> {
    let benchmark = load_benchmark(&a.benchmark).with_context(|| format!("loading {}", a.benchmark.display()))?;
    let model = load_model(&a.model)?;
    let out = curate_benchmark(&benchmark, &model, &c.curate)?;
    let crd = g.out.join(format!("{}.crd", c.curate.dataset));
    out.file.write(&crd)?;
    out.datacard.write(&datacard_path(&crd))?;
    let mut s = format!(
        "{} records, {} calibration samples, {} skipped\nwrote {} and {}\n",
        out.report.records,
        out.report.calibration,
        out.report.skipped.len(),
        crd.display(),
        datacard_path(&crd).display()
    );
    for sk in &out.report.skipped {
        let _ = writeln!(s, "skipped {}: {}", sk.id, sk.reason);
    }
    say(g, s);
    Ok(())
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    /// Container curated on the anchor model.
    #[arg(long)]
    crd: PathBuf,
    #[arg(long)]
    anchor: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "subspace")]
    paradigm: Paradigm,
}

pub fn translate(a: &TranslateArgs, c: &Config, g: &Global) -> Result<()> {
    let file = load_file(&a.crd)?;
    let anchor = load_model(&a.anchor)?;
    let target = load_model(&a.target)?;
    let map = match a.paradigm {
        Paradigm::Subspace => {
            let rank = c
                .translate
                .rank
                .unwrap_or_else(|| default_rank(anchor.config().d_model, target.config().d_model));
            fit_subspace_alignment(&anchor, &target, rank)?
        }
        Paradigm::Relative => {
            let card_path = datacard_path(&a.crd);
            let anchors = if card_path.exists() {
                let card = Datacard::read(&card_path)?;
                card.check_disjoint(&file)?;
                AnchorSet::from_datacard(&card, c.translate.anchors, c.translate.seed)
            } else {
                AnchorSet::synthetic(c.translate.anchors, c.translate.seed)
            };
            fit_relative_map(&anchors, &anchor, &target)?
        }
    };
    let translated = map.translate_file(&file)?;
    let stem = a.crd.file_stem().and_then(|s| s.to_str()).unwrap_or("benchmark");
    let crd_out = g.out.join(format!("{stem}.{}.crd", a.paradigm));
    let map_out = g.out.join(format!("{stem}.{}.map", a.paradigm));
    translated.write(&crd_out)?;
    map.save(&map_out)?;
    let mut s = format!("{} map {}\n", a.paradigm, map.id());
    for f in &map.fits {
        let _ = writeln!(
            s,
            "  {:<10} rank {:>4}  relative residual {:.3e}",
            f.family, f.rank, f.relative_residual
        );
    }
    for w in &map.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    let _ = write!(s, "wrote {} and {}", crd_out.display(), map_out.display());
    say(g, s);
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    crd: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Alignment map, for containers curated on another model.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Overrides `evaluate.scorer`.
    #[arg(long)]
    scorer: Option<Scorer>,
}

pub fn evaluate(a: &EvaluateArgs, c: &Config, g: &Global) -> Result<()> {
    let file = load_file(&a.crd)?;
    let model = load_model(&a.model)?;
    let map = a
        .map
        .as_deref()
        .map(|p| crd_core::translation::AlignmentMap::load(p).with_context(|| format!("loading map {}", p.display())))
        .transpose()?;
    let scorer = a.scorer.unwrap_or(c.evaluate.scorer);
    let report = evaluate_file(&file, &model, map.as_ref(), scorer, &c.generation)?;
    write(&g.out.join("evaluation.jsonl"), report.to_jsonl())?;
    say(g, report.summary_table());
    Ok(())
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    benchmark: PathBuf,
    #[arg(long)]
    crd: PathBuf,
    /// Anchor model checkpoint.
    #[arg(long)]
    model: PathBuf,
}

pub fn verify(a: &VerifyArgs, c: &Config, g: &Global) -> Result<()> {
    let benchmark = load_benchmark(&a.benchmark).with_context(|| format!("loading {}", a.benchmark.display()))?;
    let file = load_file(&a.crd)?;
    let model = load_model(&a.model)?;
    let report = verify_equivalence(&benchmark, &file, &model, c.evaluate.scorer, &c.generation)?;
    write(&g.out.join("verification.jsonl"), report.to_jsonl())?;
    say(g, report.summary_table());
    if !report.passed() {
        return Err(GateFailure(format!(
            "uncompressed f32 release agrees on {:.4} of items, 1.0 required",
            report.agreement
        ))
        .into());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    #[arg(long)]
    crd: PathBuf,
    /// The model the container was curated on.
    #[arg(long)]
    model: PathBuf,
}

pub fn attack(a: &AttackArgs, c: &Config, g: &Global) -> Result<()> {
    let file = load_file(&a.crd)?;
    let model = load_model(&a.model)?;
    let (recoveries, notes) = attack_file(&file, &model, &c.attack)?;
    let mut out = json!({"attack": c.attack, "records": recoveries.len(), "notes": notes}).to_string() + "\n";
    for r in &recoveries {
        let mut guesses = r.guesses.clone();
        guesses.sort_unstable();
        let text = detokenize(&guesses.iter().map(|&(_, t)| t).collect::<Vec<_>>());
        out += &(json!({"id": r.id, "guesses": guesses, "text": text}).to_string() + "\n");
    }
    write(&g.out.join("attack.jsonl"), out)?;
    let mut s = format!(
        "{:?} on layer {} {:?}: {} records\n",
        c.attack.attack,
        c.attack.layer,
        c.attack.family,
        recoveries.len()
    );
    for n in &notes {
        let _ = writeln!(s, "note: {n}");
    }
    say(g, s);
    Ok(())
}

pub fn lab(c: &Config, g: &Global) -> Result<()> {
    let report = run_contamination_experiment(&c.lab)?;
    write(&g.out.join("lab.json"), serde_json::to_string_pretty(&report)?)?;
    say(g, report.summary_table());
    Ok(())
}

#[derive(Args, Debug)]
pub struct StorageArgs {
    /// Read the shape from this checkpoint instead of the Llama-2-7B preset.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    tokens: u64,
    #[arg(long, value_delimiter = ',', default_values = ["f32", "f16", "q8"])]
    dtype: Vec<DType>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.2, 0.12, 0.007])]
    retain: Vec<f64>,
}

fn human(bytes: f64) -> String {
    const UNITS: [&str; 5] = ["B", "KB", "MB", "GB", "TB"];
    let mut v = bytes;
    let mut u = 0;
    while v >= 1000.0 && u + 1 < UNITS.len() {
        v /= 1000.0;
        u += 1;
    }
    format!("{v:.2} {}", UNITS[u])
}

pub fn storage(a: &StorageArgs, g: &Global) -> Result<()> {
    let (label, shape) = match &a.model {
        Some(p) => {
            let m = load_model(p)?;
            (p.display().to_string(), StorageShape::from(m.config()))
        }
        None => ("llama-2-7b".to_string(), StorageShape::LLAMA2_7B),
    };
    if a.retain.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        bail!("retain fractions must be in (0, 1]");
    }
    let mut s = format!(
        "{label}: L={} kv_heads={} d_head={} d_model={}, {} tokens\n{:<6} {:>8} {:>14} {:>14}\n",
        shape.n_layers, shape.n_kv_heads, shape.d_head, shape.d_model, a.tokens, "dtype", "retain", "total", "bytes"
    );
    for &dtype in &a.dtype {
        for &retain in &a.retain {
            let e = estimate_storage(shape, a.tokens, dtype, retain);
            let _ = writeln!(
                s,
                "{:<6} {:>8} {:>14} {:>14.0}",
                dtype.as_str(),
                retain,
                human(e.total_bytes()),
                e.total_bytes()
            );
        }
    }
    say(g, s);
    Ok(())
}
