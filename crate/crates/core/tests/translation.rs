use crd_core::crd_format::{CrdFile, CrdRecord, DType};
use crd_core::linalg::{max_abs_diff, random_orthogonal};
use crd_core::tinyformer::{Activation, KVCache, Model, ModelConfig, ModelParams, NormKind, PosEncoding, TokenSeq};
use crd_core::translation::{
    fit_procrustes, fit_relative_map, fit_subspace_alignment, relative_projection, rotated_clone, AlignmentMap,
    AnchorSet, CloneRotation, LinearMap, Paradigm,
};
use crd_core::CrdError;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(pos: PosEncoding, kv: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        n_kv_heads: kv,
        max_context: 48,
        pos_encoding: pos,
        norm: NormKind::Rms,
        activation: Activation::Swiglu,
        seed: 3,
        ..ModelConfig::default()
    }
}

/// Gains away from 1 so folding them into the clone is actually exercised.
fn model(cfg: &ModelConfig) -> Model {
    let mut p = ModelParams::<f32>::init(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 100);
    for l in &mut p.layers {
        for g in l.attn_norm.gain.iter_mut().chain(l.ffn_norm.gain.iter_mut()) {
            *g = rng.gen_range(0.5..1.5);
        }
    }
    for g in &mut p.final_norm.gain {
        *g = rng.gen_range(0.5..1.5);
    }
    Model::new(p)
}

fn prompts(n: usize, seed: u64) -> Vec<String> {
    AnchorSet::synthetic(n, seed).prompts
}

fn record(model: &Model, prompt: &str, id: &str) -> CrdRecord {
    let (cache, h) = model.params().prefill(&TokenSeq::prompt(prompt)).unwrap();
    CrdRecord::from_release(id, &cache, &h, "ans", DType::F32)
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn latent_gap(a: &CrdRecord, b: &CrdRecord) -> f32 {
    let (ca, ha) = a.to_release().unwrap();
    let (cb, hb) = b.to_release().unwrap();
    let mut gap = max_diff(&ha.h, &hb.h);
    for (la, lb) in ca.layers().iter().zip(cb.layers()) {
        assert_eq!(la.positions, lb.positions);
        gap = gap.max(max_diff(&la.keys, &lb.keys)).max(max_diff(&la.values, &lb.values));
    }
    gap
}

fn scale_of(r: &CrdRecord) -> f32 {
    let (c, h) = r.to_release().unwrap();
    c.layers()
        .iter()
        .flat_map(|l| l.keys.iter().chain(&l.values))
        .chain(&h.h)
        .fold(0.0f32, |m, v| m.max(v.abs()))
}

fn rotate_cache(rot: &CloneRotation, cache: &KVCache<f32>) -> KVCache<f32> {
    let layers = cache
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| crd_core::tinyformer::LayerCache {
            keys: rot.keys[l].apply_rows(&layer.keys).unwrap(),
            values: rot.values[l].apply_rows(&layer.values).unwrap(),
            positions: layer.positions.clone(),
        })
        .collect();
    KVCache::from_parts(layers, cache.prompt_len(), cache.n_kv_heads(), cache.d_head()).unwrap()
}

#[test]
fn rotated_clone_is_functionally_identical() {
    for cfg in [
        small(PosEncoding::Rotary, 4),
        small(PosEncoding::Rotary, 2),
        small(PosEncoding::LearnedAbsolute, 2),
    ] {
        let a = model(&cfg);
        let (clone, rot) = rotated_clone(a.params(), 11).unwrap();
        for p in prompts(5, 1) {
            let toks = TokenSeq::prompt(&p);
            let la = a.params().forward_train(&toks).unwrap();
            let lc = clone.forward_train(&toks).unwrap();
            assert!(max_diff(&la.data, &lc.data) < 1e-3, "{cfg:?}");

            let (ca, ha) = a.params().prefill(&toks).unwrap();
            let (cc, hc) = clone.prefill(&toks).unwrap();
            let rotated = rotate_cache(&rot, &ca);
            for (x, y) in rotated.layers().iter().zip(cc.layers()) {
                assert!(max_diff(&x.keys, &y.keys) < 1e-4);
                assert!(max_diff(&x.values, &y.values) < 1e-4);
            }
            assert!(max_diff(&rot.hidden.apply_rows(&ha.h).unwrap(), &hc.h) < 1e-4);
        }
    }
}

#[test]
fn layer_norm_models_cannot_be_cloned() {
    let cfg = ModelConfig {
        norm: NormKind::Layer,
        ..small(PosEncoding::Rotary, 2)
    };
    assert!(rotated_clone(&ModelParams::init(&cfg).unwrap(), 0).is_err());
}

#[test]
fn procrustes_recovers_planted_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for d in [16, 64, 128] {
        let k = 2 * d;
        let x = DMatrix::from_fn(k, d, |_, _| rng.gen_range(-1.0..1.0));
        let r0 = random_orthogonal(d, &mut rng);
        let fit = fit_procrustes(&x, &(&x * &r0)).unwrap();
        assert!(max_abs_diff(&fit.rotation, &r0) < 1e-6, "d={d}");
        assert!(max_abs_diff(&(fit.rotation.transpose() * &fit.rotation), &DMatrix::identity(d, d)) < 1e-6);
        let same = fit_procrustes(&x, &x).unwrap();
        assert!(max_abs_diff(&same.rotation, &DMatrix::identity(d, d)) < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relative_projection_ignores_rotations(seed in any::<u64>(), d in 2usize..24, k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthogonal(d, &mut rng);
        let point: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let anchors: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let rot = |v: &Vec<f64>| -> Vec<f64> {
            (0..d).map(|c| (0..d).map(|r| v[r] * q[(r, c)]).sum()).collect()
        };
        let before = relative_projection(&point, &anchors);
        let after = relative_projection(&rot(&point), &anchors.iter().map(rot).collect::<Vec<_>>());
        prop_assert_eq!(before.len(), k);
        for (b, a) in before.iter().zip(&after) {
            prop_assert!((b - a).abs() < 1e-6);
        }
    }
}

#[test]
fn subspace_self_alignment_is_identity() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let map = fit_subspace_alignment(&a, &a, 32).unwrap();
    for (i, p) in prompts(10, 2).iter().enumerate() {
        let r = record(&a, p, &i.to_string());
        let t = map.translate_record(&r).unwrap();
        assert!(latent_gap(&r, &t) < 1e-5 * scale_of(&r).max(1.0));
        assert_eq!(t.answer, r.answer);
    }
}

#[test]
fn subspace_alignment_matches_rotated_clone() {
    for cfg in [small(PosEncoding::Rotary, 2), small(PosEncoding::LearnedAbsolute, 4)] {
        let a = model(&cfg);
        let (cp, _) = rotated_clone(a.params(), 5).unwrap();
        let c = Model::new(cp);
        let map = fit_subspace_alignment(&a, &c, cfg.d_model).unwrap();
        for (i, p) in prompts(10, 3).iter().enumerate() {
            let translated = map.translate_record(&record(&a, p, &i.to_string())).unwrap();
            let native = record(&c, p, &i.to_string());
            assert!(latent_gap(&translated, &native) < 1e-4, "{cfg:?}");
        }
    }
}

#[test]
fn subspace_rank_bounds() {
    let a = model(&small(PosEncoding::Rotary, 2));
    assert!(matches!(fit_subspace_alignment(&a, &a, 0), Err(CrdError::Rank(_))));
    assert!(matches!(fit_subspace_alignment(&a, &a, 33), Err(CrdError::Rank(_))));
}

#[test]
fn subspace_residuals_do_not_grow_with_rank() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let b = model(&ModelConfig {
        d_model: 48,
        seed: 9,
        ..small(PosEncoding::Rotary, 2)
    });
    let mut prev: Option<AlignmentMap> = None;
    for r in [1, 2, 4, 8, 16, 24, 32] {
        let map = fit_subspace_alignment(&a, &b, r).unwrap();
        assert_eq!(map.hidden.d_in, 32);
        assert_eq!(map.hidden.d_out, 48);
        if let Some(p) = &prev {
            for (now, before) in map.fits.iter().zip(&p.fits) {
                assert_eq!(now.family, before.family);
                assert!(now.residual <= before.residual * (1.0 + 1e-9) + 1e-9, "{} at rank {r}", now.family);
            }
        }
        prev = Some(map);
    }
}

#[test]
fn mismatched_position_schemes_are_rejected() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let b = model(&small(PosEncoding::LearnedAbsolute, 2));
    assert!(matches!(fit_subspace_alignment(&a, &b, 4), Err(CrdError::Compatibility(_))));
    assert!(matches!(
        fit_relative_map(&AnchorSet::synthetic(8, 0), &a, &b),
        Err(CrdError::Compatibility(_))
    ));
}

#[test]
fn relative_self_map_is_near_identity() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let map = fit_relative_map(&AnchorSet::synthetic(64, 4), &a, &a).unwrap();
    assert_eq!(map.paradigm, Paradigm::Relative);
    for m in std::iter::once(&map.hidden).chain(&map.keys).chain(&map.values) {
        let eye = LinearMap::identity(m.d_in).matrix();
        let rel = (m.matrix() - &eye).norm() / eye.norm();
        assert!(rel < 1e-3, "{rel}");
    }
    assert!(map.warnings.is_empty(), "{:?}", map.warnings);
}

#[test]
fn relative_map_on_rotated_clone_keeps_first_tokens() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let (cp, _) = rotated_clone(a.params(), 6).unwrap();
    let c = Model::new(cp);
    let map = fit_relative_map(&AnchorSet::synthetic(128, 5), &a, &c).unwrap();
    let mut agree = 0;
    let eval = prompts(100, 77);
    for (i, p) in eval.iter().enumerate() {
        let translated = map.translate_record(&record(&a, p, &i.to_string())).unwrap();
        let (cache, h) = translated.to_release().unwrap();
        let got = c.params().decode_first(&cache, &h).unwrap().token;
        let (cache, h) = c.params().prefill(&TokenSeq::prompt(p)).unwrap();
        agree += usize::from(got == c.params().decode_first(&cache, &h).unwrap().token);
    }
    assert!(agree >= 95, "{agree}/100");
}

#[test]
fn single_anchor_warns() {
    let a = model(&ModelConfig {
        d_model: 128,
        n_layers: 1,
        ..small(PosEncoding::Rotary, 2)
    });
    let map = fit_relative_map(&AnchorSet::synthetic(1, 0), &a, &a).unwrap();
    assert!(map.warnings.iter().any(|w| w.contains("under-determined")));
    assert!(map.warnings.iter().any(|w| w.contains("anchor prompts")));
}

#[test]
fn translation_checks_shapes_and_fingerprints() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let b = model(&ModelConfig {
        n_kv_heads: 4,
        ..small(PosEncoding::Rotary, 2)
    });
    let map = fit_subspace_alignment(&a, &b, 8).unwrap();
    let wrong = record(&b, "hello there", "x");
    assert!(matches!(map.translate_record(&wrong), Err(CrdError::Shape(_))));

    let mut file = CrdFile::new(b.fingerprint());
    file.records.push(record(&a, "hello there", "x"));
    assert!(matches!(map.translate_file(&file), Err(CrdError::Compatibility(_))));
    file.fingerprint = a.fingerprint();
    let out = map.translate_file(&file).unwrap();
    assert_eq!(out.fingerprint, b.fingerprint());
    let (cache, h) = out.records[0].to_release().unwrap();
    assert_eq!(cache.n_kv_heads(), 4);
    assert_eq!(h.h.len(), 32);
    assert_eq!(out.records[0].answer, "ans");
}

#[test]
fn identity_map_changes_only_the_fingerprint() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let mut map = fit_subspace_alignment(&a, &a, 32).unwrap();
    map.hidden = LinearMap::identity(32);
    map.keys = vec![LinearMap::identity(16); 2];
    map.values = vec![LinearMap::identity(16); 2];
    let other = model(&ModelConfig {
        seed: 44,
        ..small(PosEncoding::Rotary, 2)
    });
    map.target = other.fingerprint();
    let mut file = CrdFile::new(a.fingerprint());
    for dtype in [DType::F32, DType::F16, DType::Q8] {
        let (cache, h) = a.params().prefill(&TokenSeq::prompt("identity check")).unwrap();
        file.records.push(CrdRecord::from_release(dtype.as_str(), &cache, &h, "y", dtype));
    }
    let out = map.translate_file(&file).unwrap();
    assert_eq!(out.fingerprint, other.fingerprint());
    for (x, y) in file.records.iter().zip(&out.records) {
        assert!(x.bit_eq(y), "{}", x.id);
    }
}

#[test]
fn map_file_round_trip() {
    let a = model(&small(PosEncoding::Rotary, 2));
    let map = fit_relative_map(&AnchorSet::synthetic(4, 1), &a, &a).unwrap();
    assert!(!map.warnings.is_empty());
    let back = AlignmentMap::from_bytes(&map.to_bytes().unwrap()).unwrap();
    assert_eq!(back, map);
    assert_eq!(back.id(), map.id());
}
