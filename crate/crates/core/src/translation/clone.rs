use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CrdError, Result};
use crate::linalg::{from_f32_rows, random_orthogonal, to_f32_rows};
use crate::tinyformer::{ModelParams, NormKind, NormParams, PosEncoding};
use crate::translation::map::LinearMap;
use crate::translation::subspace::gain_folded as folded;

/// The exact latent correspondence between a model and its rotated clone.
#[derive(Debug, Clone, PartialEq)]
pub struct CloneRotation {
    pub hidden: LinearMap,
    pub keys: Vec<LinearMap>,
    pub values: Vec<LinearMap>,
}

fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), b.shape()).copy_from(b);
        at += b.nrows();
    }
    out
}

/// Independent planar rotations of every `(2i, 2i+1)` pair. These commute
/// with rotary phases, so rotated keys still carry valid positions.
fn pair_rotation<R: Rng>(d_head: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d_head, d_head);
    for i in 0..d_head / 2 {
        let (s, c) = rng.gen_range(0.0..std::f64::consts::TAU).sin_cos();
        let (a, b) = (2 * i, 2 * i + 1);
        m[(a, a)] = c;
        m[(a, b)] = s;
        m[(b, a)] = -s;
        m[(b, b)] = c;
    }
    m
}

fn unit_norm(d: usize) -> NormParams<f32> {
    NormParams {
        gain: vec![1.0; d],
        bias: Vec::new(),
    }
}

/// Builds a functionally equivalent model whose residual stream is rotated by
/// a random orthogonal `R` and whose every key/value head is rotated by its
/// own orthogonal matrix. Norm gains are folded into the adjacent projections
/// first, so the clone's logits match the original up to rounding.
///
/// Only RMS-normalized models can be cloned this way.
pub fn rotated_clone(params: &ModelParams<f32>, seed: u64) -> Result<(ModelParams<f32>, CloneRotation)> {
    let cfg = params.config.clone();
    if cfg.norm != NormKind::Rms {
        return Err(CrdError::Config(
            "rotated clones need RMS normalization (layer norm centering is not rotation invariant)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, v, dh) = (cfg.d_model, cfg.vocab_size, cfg.d_head());
    let (qd, kvd, ff) = (cfg.q_dim(), cfg.kv_dim(), cfg.ffn_hidden());
    let group = cfg.group_size();
    let r = random_orthogonal(d, &mut rng);
    let rt = r.transpose();

    let mut out = params.clone();
    out.tok_embed = to_f32_rows(&(from_f32_rows(v, d, &params.tok_embed) * &r));
    if cfg.pos_encoding == PosEncoding::LearnedAbsolute {
        out.pos_embed = to_f32_rows(&(from_f32_rows(cfg.max_context, d, &params.pos_embed) * &r));
    }
    out.lm_head = to_f32_rows(&(&rt * folded(&params.final_norm.gain, &params.lm_head, v)));
    out.final_norm = unit_norm(d);

    let mut keys = Vec::with_capacity(cfg.n_layers);
    let mut values = Vec::with_capacity(cfg.n_layers);
    for (lp, lo) in params.layers.iter().zip(out.layers.iter_mut()) {
        let bs: Vec<DMatrix<f64>> = (0..cfg.n_kv_heads)
            .map(|_| match cfg.pos_encoding {
                PosEncoding::Rotary => pair_rotation(dh, &mut rng),
                PosEncoding::LearnedAbsolute => random_orthogonal(dh, &mut rng),
            })
            .collect();
        let cs: Vec<DMatrix<f64>> = (0..cfg.n_kv_heads).map(|_| random_orthogonal(dh, &mut rng)).collect();
        let per_kv = |m: &[DMatrix<f64>]| block_diag(&m.iter().collect::<Vec<_>>());
        let per_q = |m: &[DMatrix<f64>]| block_diag(&(0..cfg.n_heads).map(|h| &m[h / group]).collect::<Vec<_>>());
        let (bk, bq, cv, cq) = (per_kv(&bs), per_q(&bs), per_kv(&cs), per_q(&cs));

        let g1 = &lp.attn_norm.gain;
        lo.wq = to_f32_rows(&(&rt * folded(g1, &lp.wq, qd) * &bq));
        lo.wk = to_f32_rows(&(&rt * folded(g1, &lp.wk, kvd) * &bk));
        lo.wv = to_f32_rows(&(&rt * folded(g1, &lp.wv, kvd) * &cv));
        lo.wo = to_f32_rows(&(cq.transpose() * from_f32_rows(qd, d, &lp.wo) * &r));
        let g2 = &lp.ffn_norm.gain;
        if !lp.w_gate.is_empty() {
            lo.w_gate = to_f32_rows(&(&rt * folded(g2, &lp.w_gate, ff)));
        }
        lo.w_up = to_f32_rows(&(&rt * folded(g2, &lp.w_up, ff)));
        lo.w_down = to_f32_rows(&(from_f32_rows(ff, d, &lp.w_down) * &r));
        lo.attn_norm = unit_norm(d);
        lo.ffn_norm = unit_norm(d);
        keys.push(LinearMap::from_matrix(&bk, None));
        values.push(LinearMap::from_matrix(&cv, None));
    }
    Ok((
        out,
        CloneRotation {
            hidden: LinearMap::from_matrix(&r, None),
            keys,
            values,
        },
    ))
}
