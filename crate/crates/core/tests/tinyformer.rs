use crd_core::tinyformer::{
    nll_loss, train_step, Activation, CacheScoring, GenSettings, Logits, ModelConfig, ModelParams, NormKind, PosEncoding, TokenSeq,
    BOS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(pos: PosEncoding, norm: NormKind, act: Activation, kv: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 4,
        n_heads: 2,
        n_kv_heads: kv,
        vocab_size: 4,
        max_context: 8,
        pos_encoding: pos,
        norm,
        activation: act,
        seed: 5,
    }
}

fn all_variants(kv: usize) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for pos in [PosEncoding::Rotary, PosEncoding::LearnedAbsolute] {
        for norm in [NormKind::Rms, NormKind::Layer] {
            for act in [Activation::Swiglu, Activation::Gelu] {
                out.push(micro(pos, norm, act, kv));
            }
        }
    }
    out
}

/// Matrix-at-a-time reference forward written independently of the crate's
/// per-position kernels: explicit triple loops, a full masked score matrix,
/// and positional rotation in its complex-multiplication form.
fn reference_forward(p: &ModelParams<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &p.config;
    let (d, t, v) = (cfg.d_model, tokens.len(), cfg.vocab_size);
    let dh = d / cfg.n_heads;
    let matmul = |x: &Vec<Vec<f64>>, w: &[f64], cols: usize| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..cols)
                    .map(|c| row.iter().enumerate().map(|(r, &a)| a * w[r * cols + c]).sum())
                    .collect()
            })
            .collect()
    };
    let norm = |x: &Vec<Vec<f64>>, gain: &[f64], bias: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = if cfg.norm == NormKind::Layer { row.iter().sum::<f64>() / n } else { 0.0 };
                let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
                let s = (var + 1e-5).sqrt();
                (0..row.len())
                    .map(|i| (row[i] - mean) / s * gain[i] + bias.get(i).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect()
    };
    let rotate = |x: &mut Vec<Vec<f64>>| {
        if cfg.pos_encoding != PosEncoding::Rotary {
            return;
        }
        for (pos, row) in x.iter_mut().enumerate() {
            for h in 0..row.len() / dh {
                for i in 0..dh / 2 {
                    let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / dh as f64);
                    let (re, im) = (row[h * dh + 2 * i], row[h * dh + 2 * i + 1]);
                    row[h * dh + 2 * i] = re * theta.cos() - im * theta.sin();
                    row[h * dh + 2 * i + 1] = re * theta.sin() + im * theta.cos();
                }
            }
        }
    };
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            (0..d)
                .map(|j| {
                    let e = p.tok_embed[tok as usize * d + j];
                    e + p.pos_embed.get(i * d + j).copied().unwrap_or(0.0)
                })
                .collect()
        })
        .collect();
    for lp in &p.layers {
        let a = norm(&x, &lp.attn_norm.gain, &lp.attn_norm.bias);
        let mut q = matmul(&a, &lp.wq, cfg.q_dim());
        let mut k = matmul(&a, &lp.wk, cfg.kv_dim());
        let vv = matmul(&a, &lp.wv, cfg.kv_dim());
        rotate(&mut q);
        rotate(&mut k);
        let mut o = vec![vec![0.0; cfg.q_dim()]; t];
        for h in 0..cfg.n_heads {
            let g = h * cfg.n_kv_heads / cfg.n_heads;
            for i in 0..t {
                let mut s = vec![f64::NEG_INFINITY; t];
                for j in 0..=i {
                    s[j] = (0..dh).map(|c| q[i][h * dh + c] * k[j][g * dh + c]).sum::<f64>() / (dh as f64).sqrt();
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|a| (a - m).exp()).sum();
                for j in 0..=i {
                    let w = (s[j] - m).exp() / z;
                    for c in 0..dh {
                        o[i][h * dh + c] += w * vv[j][g * dh + c];
                    }
                }
            }
        }
        let proj = matmul(&o, &lp.wo, d);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += proj[i][j];
            }
        }
        let b = norm(&x, &lp.ffn_norm.gain, &lp.ffn_norm.bias);
        let hidden = cfg.ffn_hidden();
        let up = matmul(&b, &lp.w_up, hidden);
        let act: Vec<Vec<f64>> = match cfg.activation {
            Activation::Gelu => up
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                        .collect()
                })
                .collect(),
            Activation::Swiglu => {
                let gate = matmul(&b, &lp.w_gate, hidden);
                gate.iter()
                    .zip(&up)
                    .map(|(gr, ur)| gr.iter().zip(ur).map(|(&g, &u)| g / (1.0 + (-g).exp()) * u).collect())
                    .collect()
            }
        };
        let down = matmul(&act, &lp.w_down, d);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += down[i][j];
            }
        }
    }
    let f = norm(&x, &p.final_norm.gain, &p.final_norm.bias);
    matmul(&f, &p.lm_head, v)
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: u32) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

#[test]
fn forward_matches_loop_reference_on_hand_sized_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kv in [1, 2] {
        for cfg in all_variants(kv) {
            let p = ModelParams::<f64>::init(&cfg).unwrap();
            let tokens = random_tokens(&mut rng, 6, 4);
            let got = p.forward_train(&TokenSeq::new(tokens.clone())).unwrap();
            let want = reference_forward(&p, &tokens);
            for (i, row) in want.iter().enumerate() {
                for (a, b) in got.row(i).iter().zip(row) {
                    assert!((a - b).abs() < 1e-10, "{cfg:?} row {i}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn nll_matches_scalar_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let ids = random_tokens(&mut rng, 3, 4);
        let logits = Logits { rows: 3, vocab: 4, data: data.clone() };
        let mut want = 0.0;
        for i in 0..2 {
            let row = &data[i * 4..i * 4 + 4];
            let z: f64 = row.iter().map(|a| a.exp()).sum();
            want -= (row[ids[i + 1] as usize].exp() / z).ln();
        }
        let got = nll_loss(&logits, &TokenSeq::new(ids)).unwrap();
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn gradients_match_central_differences_for_every_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kv in [1, 2] {
        for cfg in all_variants(kv) {
            let mut p = ModelParams::<f64>::init(&cfg).unwrap();
            // Move norm parameters away from their trivial initial values.
            for t in p.tensors_mut() {
                for v in t.iter_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
            let seq = TokenSeq::new(random_tokens(&mut rng, 5, 4));
            let (_, grads) = p.loss_and_grad(&seq, 1.0).unwrap();
            let loss_at = |q: &ModelParams<f64>| nll_loss(&q.forward_train(&seq).unwrap(), &seq).unwrap();
            let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().cloned().collect();
            let n_tensors = analytic.len();
            for ti in 0..n_tensors {
                for (j, &g) in analytic[ti].iter().enumerate() {
                    let eps = 1e-5;
                    let mut plus = p.clone();
                    plus.tensors_mut()[ti][j] += eps;
                    let mut minus = p.clone();
                    minus.tensors_mut()[ti][j] -= eps;
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                    let denom = g.abs().max(numeric.abs()).max(1e-6);
                    let rel = (g - numeric).abs() / denom;
                    assert!(
                        rel < 1e-3 || (g - numeric).abs() < 1e-8,
                        "{cfg:?} tensor {ti} elem {j}: analytic {g} numeric {numeric}"
                    );
                }
            }
        }
    }
}

#[test]
fn gqa_with_full_kv_heads_is_the_mha_path() {
    for cfg in all_variants(2) {
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let tokens = vec![0, 3, 1, 2, 2];
        let got = p.forward_train(&TokenSeq::new(tokens.clone())).unwrap();
        let want = reference_forward(&p, &tokens);
        for (i, row) in want.iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

fn small_f32(seed: u64, kv: usize) -> ModelParams<f32> {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        n_kv_heads: kv,
        max_context: 48,
        seed,
        ..ModelConfig::default()
    };
    ModelParams::init(&cfg).unwrap()
}

fn random_prompt(rng: &mut ChaCha8Rng, max_len: usize) -> TokenSeq {
    let len = rng.gen_range(1..=max_len);
    let mut ids = vec![BOS];
    ids.extend(random_tokens(rng, len, 256));
    TokenSeq::new(ids)
}

#[test]
fn prefill_equals_incremental_decoding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kv in [4, 2, 1] {
        let p = small_f32(9, kv);
        for _ in 0..10 {
            let prompt = random_prompt(&mut rng, 20);
            let (batch, _) = p.prefill(&prompt).unwrap();
            let (mut inc, _) = p.prefill(&TokenSeq::new(prompt.ids()[..1].to_vec())).unwrap();
            for &tok in &prompt.ids()[1..] {
                p.decode_step(&mut inc, tok).unwrap();
            }
            assert_eq!(batch.layers(), inc.layers());
        }
    }
}

#[test]
fn accumulated_scores_sum_final_query_scores_over_prefixes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = small_f32(12, 2);
    for _ in 0..5 {
        let prompt = random_prompt(&mut rng, 20);
        let t = prompt.len();
        let (_, _, acc) = p.prefill_with_scores(&prompt, CacheScoring::Accumulated).unwrap();
        let mut want = vec![vec![0.0; t]; 2];
        for q in 1..=t {
            let prefix = TokenSeq::new(prompt.ids()[..q].to_vec());
            let (_, _, s) = p.prefill_with_scores(&prefix, CacheScoring::FinalQuery).unwrap();
            for (w, row) in want.iter_mut().zip(&s.per_layer) {
                for (a, b) in w.iter_mut().zip(row) {
                    *a += b;
                }
            }
        }
        for (got, want) in acc.per_layer.iter().zip(&want) {
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-9);
            }
            // Each query spreads one unit of mass per head.
            assert!((got.iter().sum::<f64>() - (4 * t) as f64).abs() < 1e-4);
        }
    }
}

#[test]
fn decode_first_equals_full_forward_argmax_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kv in [4, 2] {
        let p = small_f32(10, kv);
        for _ in 0..20 {
            let prompt = random_prompt(&mut rng, 30);
            let (cache, h) = p.prefill(&prompt).unwrap();
            let step = p.decode_first(&cache, &h).unwrap();
            let full = p.forward_train(&prompt).unwrap();
            assert_eq!(step.logits.as_slice(), full.last());
            assert_eq!(cache.layers().iter().map(|l| l.len()).max(), Some(prompt.len()));
        }
    }
}

#[test]
fn cached_generation_equals_uncached_generation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = small_f32(12, 2);
    for _ in 0..10 {
        let prompt = random_prompt(&mut rng, 20);
        let settings = GenSettings {
            stop_token: None,
            ..GenSettings::greedy(12)
        };
        let (mut cache, h) = p.prefill(&prompt).unwrap();
        let cached = p.generate(&mut cache, &h, &settings).unwrap();
        let plain = p.generate_uncached(&prompt, &settings).unwrap();
        assert_eq!(cached, plain);
        assert_eq!(cached.len(), 12);
    }
}

#[test]
fn learned_absolute_models_decode_equivalently() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 24,
        n_heads: 3,
        n_kv_heads: 3,
        max_context: 32,
        pos_encoding: PosEncoding::LearnedAbsolute,
        norm: NormKind::Layer,
        activation: Activation::Gelu,
        seed: 2,
        ..ModelConfig::default()
    };
    let p = ModelParams::<f32>::init(&cfg).unwrap();
    let prompt = TokenSeq::prompt("key:ab val:");
    let settings = GenSettings {
        stop_token: None,
        ..GenSettings::greedy(6)
    };
    let (mut cache, h) = p.prefill(&prompt).unwrap();
    assert_eq!(
        p.generate(&mut cache, &h, &settings).unwrap(),
        p.generate_uncached(&prompt, &settings).unwrap()
    );
}

#[test]
fn sgd_memorizes_one_sequence() {
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        n_kv_heads: 2,
        max_context: 32,
        seed: 1,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::<f32>::init(&cfg).unwrap();
    let batch = [TokenSeq::example("abc", "xyz")];
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(train_step(&mut p, &batch, 0.1).unwrap());
    }
    let first: f32 = losses[..20].iter().sum::<f32>() / 20.0;
    let last: f32 = losses[180..].iter().sum::<f32>() / 20.0;
    assert!(last < first, "{first} -> {last}");
    assert!(*losses.last().unwrap() < 0.1, "final loss {}", losses.last().unwrap());
}

#[test]
fn greedy_generation_is_deterministic() {
    let p = small_f32(3, 2);
    let prompt = TokenSeq::prompt("hello");
    let (cache, h) = p.prefill(&prompt).unwrap();
    let a = p.generate(&mut cache.clone(), &h, &GenSettings::greedy(8)).unwrap();
    let b = p.generate(&mut cache.clone(), &h, &GenSettings::greedy(8)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn logits_before_a_perturbation_are_unchanged(
        tokens in prop::collection::vec(0u32..259, 2..24),
        j_frac in 0.0f64..1.0,
        replacement in 0u32..259,
    ) {
        let p = small_f32(7, 2);
        let j = 1 + ((tokens.len() - 1) as f64 * j_frac) as usize % (tokens.len() - 1);
        let mut other = tokens.clone();
        other[j] = replacement;
        let a = p.forward_train(&TokenSeq::new(tokens)).unwrap();
        let b = p.forward_train(&TokenSeq::new(other)).unwrap();
        for i in 0..j {
            prop_assert_eq!(a.row(i), b.row(i));
        }
    }

    #[test]
    fn prefill_decode_first_agrees_with_forward(tokens in prop::collection::vec(0u32..256, 0..30)) {
        let p = small_f32(8, 1);
        let mut ids = vec![BOS];
        ids.extend(tokens);
        let prompt = TokenSeq::new(ids);
        let (cache, h) = p.prefill(&prompt).unwrap();
        let step = p.decode_first(&cache, &h).unwrap();
        let full = p.forward_train(&prompt).unwrap();
        prop_assert_eq!(step.logits.as_slice(), full.last());
    }
}
