use nalgebra::DMatrix;

use crate::error::{CrdError, Result};
use crate::linalg::{from_f32_rows, pinv, pinv_rank};
use crate::tinyformer::{Model, ModelParams, PosEncoding};
use crate::translation::check_pair;
use crate::translation::map::{AlignmentMap, FamilyFit, LatentShape, LinearMap, Paradigm};

/// `min(d_anchor, d_target) / 4`, at least 1.
pub fn default_rank(d_anchor: usize, d_target: usize) -> usize {
    (d_anchor.min(d_target) / 4).max(1)
}

/// Matrix whose rows live in the residual-stream basis: token embeddings,
/// learned position embeddings and the gain-folded unembedding columns.
fn residual_rows(p: &ModelParams<f32>) -> DMatrix<f64> {
    let cfg = &p.config;
    let (d, v) = (cfg.d_model, cfg.vocab_size);
    let mut blocks = vec![from_f32_rows(v, d, &p.tok_embed)];
    if cfg.pos_encoding == PosEncoding::LearnedAbsolute {
        blocks.push(from_f32_rows(cfg.max_context, d, &p.pos_embed));
    }
    let head = from_f32_rows(d, v, &p.lm_head);
    let gain = &p.final_norm.gain;
    blocks.push(DMatrix::from_fn(v, d, |r, c| gain[c] as f64 * head[(c, r)]));
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, d);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.nrows()).copy_from(&b);
        at += b.nrows();
    }
    out
}

/// `diag(gain) · W` for a `[d × cols]` row-major projection.
pub(crate) fn gain_folded(gain: &[f32], w: &[f32], cols: usize) -> DMatrix<f64> {
    let mut m = from_f32_rows(gain.len(), cols, w);
    for (r, &g) in gain.iter().enumerate() {
        m.row_mut(r).scale_mut(g as f64);
    }
    m
}

fn fit_of(family: String, rank: usize, fitted: &DMatrix<f64>, target: &DMatrix<f64>) -> FamilyFit {
    let residual = (fitted - target).norm();
    let scale = target.norm();
    FamilyFit {
        family,
        rank,
        residual,
        relative_residual: if scale > 0.0 { residual / scale } else { residual },
    }
}

/// Aligns the anchor's latent spaces to the target's using nothing but the
/// two weight sets.
///
/// The residual-stream map is the rank-`rank` least-squares solution of
/// `A·M ≈ B`, where `A` and `B` stack each model's embedding, position and
/// unembedding rows. Per layer, keys and values are mapped by the rank-`rank`
/// least-squares solution of `W̃ₐ·S ≈ M·W̃ₜ`, where `W̃` is the gain-folded
/// key (or value) projection and `M` is the full-rank stream map.
pub fn fit_subspace_alignment(anchor: &Model, target: &Model, rank: usize) -> Result<AlignmentMap> {
    let (pa, pt) = (anchor.params(), target.params());
    let (ca, ct) = (&pa.config, &pt.config);
    check_pair(ca, ct)?;
    let max_rank = ca.d_model.min(ct.d_model);
    if rank == 0 || rank > max_rank {
        return Err(CrdError::Rank(format!("rank {rank} outside 1..={max_rank}")));
    }

    let a = residual_rows(pa);
    let b = residual_rows(pt);
    let (a_pinv_r, _) = pinv_rank(&a, rank);
    let hidden = &a_pinv_r * &b;
    let (a_pinv, _) = pinv(&a);
    let bridge = &a_pinv * &b;
    let mut fits = vec![fit_of("hidden".into(), rank, &(&a * &hidden), &b)];

    let mut keys = Vec::with_capacity(ca.n_layers);
    let mut values = Vec::with_capacity(ca.n_layers);
    let r_kv = rank.min(ca.kv_dim());
    for (l, (la, lt)) in pa.layers.iter().zip(&pt.layers).enumerate() {
        for (family, wa, wt, out) in [
            ("keys", &la.wk, &lt.wk, &mut keys),
            ("values", &la.wv, &lt.wv, &mut values),
        ] {
            let wa = gain_folded(&la.attn_norm.gain, wa, ca.kv_dim());
            let wt = &bridge * gain_folded(&lt.attn_norm.gain, wt, ct.kv_dim());
            let (wa_pinv, _) = pinv_rank(&wa, r_kv);
            let s = wa_pinv * &wt;
            fits.push(fit_of(format!("{family}.{l}"), r_kv, &(&wa * &s), &wt));
            out.push(LinearMap::from_matrix(&s, None));
        }
    }

    Ok(AlignmentMap {
        paradigm: Paradigm::Subspace,
        anchor: anchor.fingerprint(),
        target: target.fingerprint(),
        anchor_shape: LatentShape::from(ca),
        target_shape: LatentShape::from(ct),
        size: rank,
        hidden: LinearMap::from_matrix(&hidden, None),
        keys,
        values,
        fits,
        warnings: Vec::new(),
    })
}
