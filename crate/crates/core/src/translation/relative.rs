use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::crd_format::Datacard;
use crate::error::{CrdError, Result};
use crate::linalg::pinv;
use crate::tinyformer::{Model, TokenSeq};
use crate::translation::check_pair;
use crate::translation::map::{AlignmentMap, FamilyFit, LatentShape, LinearMap, Paradigm};

pub const DEFAULT_ANCHORS: usize = 256;
/// Below this many anchors a fit is still produced but flagged.
pub const MIN_ANCHORS: usize = 8;

/// Cosine similarity of `x` to every anchor. A zero `x` (or zero anchor)
/// gives similarity 0.
pub fn relative_projection(x: &[f64], anchors: &[Vec<f64>]) -> Vec<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    anchors
        .iter()
        .map(|a| {
            assert_eq!(a.len(), x.len(), "anchor and point dims differ");
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || na == 0.0 {
                return 0.0;
            }
            x.iter().zip(a).map(|(p, q)| p * q).sum::<f64>() / (nx * na)
        })
        .collect()
}

/// Orthogonal map minimizing `‖X_anchor·R − X_target‖_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesMap {
    pub rotation: DMatrix<f64>,
    pub residual: f64,
}

impl ProcrustesMap {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.rotation
    }
}

pub fn fit_procrustes(x_anchor: &DMatrix<f64>, x_target: &DMatrix<f64>) -> Result<ProcrustesMap> {
    if x_anchor.shape() != x_target.shape() {
        return Err(CrdError::Shape(format!(
            "procrustes needs equal shapes, got {:?} and {:?}; use a subspace alignment to bridge dimensions",
            x_anchor.shape(),
            x_target.shape()
        )));
    }
    let svd = (x_anchor.transpose() * x_target).svd(true, true);
    let rotation = svd.u.expect("requested U") * svd.v_t.expect("requested Vᵀ");
    let residual = (x_anchor * &rotation - x_target).norm();
    Ok(ProcrustesMap { rotation, residual })
}

/// Prompts run through both models to pair up their latents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    pub prompts: Vec<String>,
}

const SYNTH_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789 :?=+-,.";

impl AnchorSet {
    pub fn new(prompts: Vec<String>) -> Self {
        Self { prompts }
    }

    /// `k` random printable strings of 8..=32 bytes.
    pub fn synthetic(k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = (0..k)
            .map(|_| {
                let len = rng.gen_range(8..=32);
                (0..len)
                    .map(|_| SYNTH_ALPHABET[rng.gen_range(0..SYNTH_ALPHABET.len())] as char)
                    .collect()
            })
            .collect();
        Self { prompts }
    }

    /// The datacard's calibration prompts topped up with synthetic ones to `k`.
    /// Calibration items are never scored, so no release content leaks in.
    pub fn from_datacard(card: &Datacard, k: usize, seed: u64) -> Self {
        let mut prompts: Vec<String> = card.samples.iter().take(k).map(|s| s.prompt.clone()).collect();
        let missing = k - prompts.len();
        prompts.extend(Self::synthetic(missing, seed).prompts);
        Self { prompts }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Row-stacked latents of one model over an anchor set.
struct Latents {
    hidden: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    rows: usize,
}

fn collect(model: &Model, prompts: &[TokenSeq]) -> Result<Latents> {
    let cfg = model.config();
    let mut out = Latents {
        hidden: Vec::new(),
        keys: vec![Vec::new(); cfg.n_layers],
        values: vec![Vec::new(); cfg.n_layers],
        rows: 0,
    };
    for prompt in prompts {
        let (cache, inputs) = model.params().prefill_with_block_inputs(prompt)?;
        for row in &inputs {
            out.hidden.extend(row.iter().map(|&v| v as f64));
        }
        for (l, layer) in cache.layers().iter().enumerate() {
            out.keys[l].extend(layer.keys.iter().map(|&v| v as f64));
            out.values[l].extend(layer.values.iter().map(|&v| v as f64));
        }
        out.rows += prompt.len();
    }
    Ok(out)
}

struct Affine {
    map: LinearMap,
    fit: FamilyFit,
    rank: usize,
}

/// Least-squares `Y ≈ X·W + b` via centering and the pseudo-inverse.
fn fit_affine(family: String, rows: usize, x: &[f64], y: &[f64]) -> Affine {
    let (dx, dy) = (x.len() / rows, y.len() / rows);
    let x = DMatrix::from_row_slice(rows, dx, x);
    let y = DMatrix::from_row_slice(rows, dy, y);
    let mx: DVector<f64> = x.row_mean().transpose();
    let my: DVector<f64> = y.row_mean().transpose();
    let xc = DMatrix::from_fn(rows, dx, |r, c| x[(r, c)] - mx[c]);
    let yc = DMatrix::from_fn(rows, dy, |r, c| y[(r, c)] - my[c]);
    let (xp, rank) = pinv(&xc);
    let w = xp * &yc;
    let bias: Vec<f64> = (my.transpose() - mx.transpose() * &w).iter().copied().collect();
    let residual = (&xc * &w - &yc).norm();
    let scale = yc.norm();
    Affine {
        map: LinearMap::from_matrix(&w, Some(&bias)),
        fit: FamilyFit {
            family,
            rank,
            residual,
            relative_residual: if scale > 0.0 { residual / scale } else { residual },
        },
        rank,
    }
}

/// Fits one affine map per latent family (hidden state, and keys and values
/// of every layer) from the two models' latents on the same anchor prompts.
/// Every prompt position contributes a row.
pub fn fit_relative_map(anchors: &AnchorSet, anchor: &Model, target: &Model) -> Result<AlignmentMap> {
    let (ca, ct) = (anchor.config(), target.config());
    check_pair(ca, ct)?;
    if anchors.is_empty() {
        return Err(CrdError::Empty("anchor set has no prompts".into()));
    }
    let limit = ca.max_context.min(ct.max_context);
    let prompts: Vec<TokenSeq> = anchors.prompts.iter().map(|p| TokenSeq::prompt(p)).collect();
    if let Some(p) = prompts.iter().find(|p| p.len() > limit) {
        return Err(CrdError::Length { len: p.len(), max: limit });
    }
    let la = collect(anchor, &prompts)?;
    let lt = collect(target, &prompts)?;

    let mut warnings = Vec::new();
    if anchors.len() < MIN_ANCHORS {
        warnings.push(format!(
            "only {} anchor prompts (at least {MIN_ANCHORS} expected)",
            anchors.len()
        ));
    }
    let mut fits = Vec::new();
    let mut fit = |family: String, x: &[f64], y: &[f64], d_in: usize| {
        let a = fit_affine(family.clone(), la.rows, x, y);
        if a.rank < d_in {
            warnings.push(format!(
                "{family}: anchor latents span rank {} of {d_in} dimensions; the map is under-determined",
                a.rank
            ));
        }
        fits.push(a.fit);
        a.map
    };
    let hidden = fit("hidden".into(), &la.hidden, &lt.hidden, ca.d_model);
    let mut keys = Vec::with_capacity(ca.n_layers);
    let mut values = Vec::with_capacity(ca.n_layers);
    for l in 0..ca.n_layers {
        keys.push(fit(format!("keys.{l}"), &la.keys[l], &lt.keys[l], ca.kv_dim()));
        values.push(fit(format!("values.{l}"), &la.values[l], &lt.values[l], ca.kv_dim()));
    }

    Ok(AlignmentMap {
        paradigm: Paradigm::Relative,
        anchor: anchor.fingerprint(),
        target: target.fingerprint(),
        anchor_shape: LatentShape::from(ca),
        target_shape: LatentShape::from(ct),
        size: anchors.len(),
        hidden,
        keys,
        values,
        fits,
        warnings,
    })
}
