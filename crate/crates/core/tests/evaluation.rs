use crd_core::crd_format::{CrdFile, DType};
use crd_core::curation::{curate, BenchmarkItem, CurationOptions, PlainBenchmark};
use crd_core::evaluation::{evaluate, verify_equivalence, Scorer};
use crd_core::lab::tasks::lookup_benchmark;
use crd_core::lab::{ModelInput, RecordingDecoder};
use crd_core::tinyformer::{GenSettings, Model, ModelConfig, ModelParams, TokenSeq};
use crd_core::translation::{fit_subspace_alignment, rotated_clone};
use crd_core::CrdError;
use proptest::prelude::*;

fn model(seed: u64) -> Model {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        n_kv_heads: 2,
        max_context: 48,
        seed,
        ..ModelConfig::default()
    };
    Model::new(ModelParams::init(&cfg).unwrap())
}

fn options(dtype: DType, retain: f64) -> CurationOptions {
    CurationOptions {
        dtype,
        retain_fraction: retain,
        calibration_size: 4,
        ..CurationOptions::default()
    }
}

#[test]
fn released_pipeline_matches_plaintext_pipeline() {
    let m = model(1);
    let bench = lookup_benchmark(40, 2);
    let curated = curate(&bench, &m, &options(DType::F32, 1.0)).unwrap();
    assert_eq!(curated.file.len(), 36);
    let report = verify_equivalence(&bench, &curated.file, &m, Scorer::default(), &GenSettings::greedy(6)).unwrap();
    assert!(report.exact_required);
    assert_eq!(report.agreement, 1.0);
    assert_eq!(report.accuracy_delta, 0.0);
    assert!(report.divergence_histogram.is_empty());
    assert!(report.passed());

    let eval = evaluate(&curated.file, &m, None, Scorer::default(), &GenSettings::greedy(6)).unwrap();
    assert_eq!(eval.accuracy, report.plaintext_accuracy);
    for (e, p) in eval.items.iter().zip(&report.items) {
        assert_eq!(e.tokens, p.plaintext_tokens);
    }
    let mean = eval.items.iter().map(|i| i.score).sum::<f64>() / eval.items.len() as f64;
    assert_eq!(eval.accuracy, mean);
}

#[test]
fn compressed_release_is_not_gated() {
    let m = model(1);
    let bench = lookup_benchmark(30, 3);
    let curated = curate(&bench, &m, &options(DType::F32, 0.2)).unwrap();
    let report = verify_equivalence(&bench, &curated.file, &m, Scorer::default(), &GenSettings::greedy(4)).unwrap();
    assert!(!report.exact_required);
    assert!(report.passed());
    assert!((0.0..=1.0).contains(&report.agreement));
}

#[test]
fn evaluation_is_deterministic() {
    let m = model(4);
    let bench = lookup_benchmark(20, 5);
    let file = curate(&bench, &m, &options(DType::Q8, 0.5)).unwrap().file;
    let a = evaluate(&file, &m, None, Scorer::TokenF1, &GenSettings::greedy(5)).unwrap();
    let b = evaluate(&file, &m, None, Scorer::TokenF1, &GenSettings::greedy(5)).unwrap();
    assert!(a.same_results(&b));
    let jsonl = a.to_jsonl();
    assert_eq!(jsonl.lines().count(), file.len() + 2);
    let strip = |s: String| s.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(a.to_jsonl()), strip(b.to_jsonl()));
}

#[test]
fn wrong_model_needs_a_map() {
    let a = model(1);
    let b = model(2);
    let bench = lookup_benchmark(10, 6);
    let file = curate(&bench, &a, &options(DType::F32, 1.0)).unwrap().file;
    assert!(matches!(
        evaluate(&file, &b, None, Scorer::default(), &GenSettings::default()),
        Err(CrdError::Compatibility(_))
    ));
    let map = fit_subspace_alignment(&b, &a, 8).unwrap();
    assert!(matches!(
        evaluate(&file, &b, Some(&map), Scorer::default(), &GenSettings::default()),
        Err(CrdError::Compatibility(_))
    ));
}

#[test]
fn translated_file_evaluates_like_native_on_a_clone() {
    let a = model(7);
    let (cp, _) = rotated_clone(a.params(), 3).unwrap();
    let c = Model::new(cp);
    let bench = lookup_benchmark(24, 8);
    let settings = GenSettings::greedy(4);
    let anchor_file = curate(&bench, &a, &options(DType::F32, 1.0)).unwrap().file;
    let native_file = curate(&bench, &c, &options(DType::F32, 1.0)).unwrap().file;
    let map = fit_subspace_alignment(&a, &c, 32).unwrap();
    let translated = evaluate(&anchor_file, &c, Some(&map), Scorer::ExactMatch, &settings).unwrap();
    let native = evaluate(&native_file, &c, None, Scorer::ExactMatch, &settings).unwrap();
    assert_eq!(translated.map, Some(map.id()));
    let same = translated
        .items
        .iter()
        .zip(&native.items)
        .filter(|(x, y)| x.tokens == y.tokens)
        .count();
    assert_eq!(native.items.len(), anchor_file.len());
    assert!(same + 1 >= native.items.len(), "{same}/{}", native.items.len());
}

#[test]
fn empty_inputs_are_errors() {
    let m = model(1);
    let empty = CrdFile::new(m.fingerprint());
    assert!(matches!(
        evaluate(&empty, &m, None, Scorer::default(), &GenSettings::default()),
        Err(CrdError::Empty(_))
    ));
    let bench = lookup_benchmark(10, 1);
    let file = curate(&bench, &m, &options(DType::F32, 1.0)).unwrap().file;
    let nothing = PlainBenchmark::new("t", Vec::new()).unwrap();
    assert!(matches!(
        verify_equivalence(&nothing, &file, &m, Scorer::default(), &GenSettings::default()),
        Err(CrdError::Empty(_))
    ));
}

#[test]
fn verification_rejects_unknown_ids() {
    let m = model(1);
    let bench = lookup_benchmark(10, 1);
    let file = curate(&bench, &m, &options(DType::F32, 1.0)).unwrap().file;
    let other = PlainBenchmark::new("t", vec![BenchmarkItem::new("zzz", "a=1 a?", "1")]).unwrap();
    assert!(matches!(
        verify_equivalence(&other, &file, &m, Scorer::default(), &GenSettings::default()),
        Err(CrdError::Validation(_))
    ));
}

#[test]
fn evaluation_never_feeds_a_prompt() {
    let m = model(9);
    let bench = lookup_benchmark(30, 10);
    let file = curate(&bench, &m, &options(DType::F16, 1.0)).unwrap().file;
    let audited = RecordingDecoder::new(&m);
    let report = evaluate(&file, &audited, None, Scorer::default(), &GenSettings::greedy(8)).unwrap();
    let sessions = audited.sessions();
    assert_eq!(sessions.len(), file.len());
    for s in &sessions {
        assert!(matches!(s[0], ModelInput::Resume { .. }));
        assert_eq!(s.iter().filter(|i| matches!(i, ModelInput::Resume { .. })).count(), 1);
    }
    let prompts: Vec<Vec<u32>> = bench.items.iter().map(|i| TokenSeq::prompt(&i.prompt).into_inner()).collect();
    for stream in audited.token_streams() {
        for p in &prompts {
            assert!(!stream.windows(p.len() - 1).any(|w| w == &p[1..]));
        }
    }
    assert_eq!(report.items.len(), file.len());
}

proptest! {
    #[test]
    fn scores_are_bounded(a in "[a-zA-Z0-9 ]{0,12}", b in "[a-zA-Z0-9 ]{0,12}") {
        for s in Scorer::ALL {
            let v = s.score(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(s.score(&a, &a), 1.0);
        }
    }
}
