use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crd_format::{CrdFile, CrdRecord};
use crate::error::{CrdError, Result};
use crate::tensorfile::{NamedTensor, TensorFile};
use crate::tinyformer::{Fingerprint, KVCache, LayerCache, ModelConfig, PenultimateState};

/// Row-vector affine map `y = x · W + b` with `W` row-major `[d_in × d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f32>,
    /// Empty for a purely linear map.
    pub bias: Vec<f32>,
}

impl LinearMap {
    pub fn identity(d: usize) -> Self {
        let mut weight = vec![0.0; d * d];
        for i in 0..d {
            weight[i * d + i] = 1.0;
        }
        Self {
            d_in: d,
            d_out: d,
            weight,
            bias: Vec::new(),
        }
    }

    pub fn from_matrix(m: &nalgebra::DMatrix<f64>, bias: Option<&[f64]>) -> Self {
        Self {
            d_in: m.nrows(),
            d_out: m.ncols(),
            weight: crate::linalg::to_f32_rows(m),
            bias: bias.map(|b| b.iter().map(|&v| v as f32).collect()).unwrap_or_default(),
        }
    }

    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        crate::linalg::from_f32_rows(self.d_in, self.d_out, &self.weight)
    }

    /// Maps every `d_in`-wide row of `rows`.
    pub fn apply_rows(&self, rows: &[f32]) -> Result<Vec<f32>> {
        if !rows.len().is_multiple_of(self.d_in) {
            return Err(CrdError::Shape(format!(
                "{} values are not whole rows of width {}",
                rows.len(),
                self.d_in
            )));
        }
        let mut out = Vec::with_capacity(rows.len() / self.d_in * self.d_out);
        let mut acc = vec![0.0f64; self.d_out];
        for row in rows.chunks_exact(self.d_in) {
            match self.bias.is_empty() {
                true => acc.fill(0.0),
                false => acc.iter_mut().zip(&self.bias).for_each(|(a, &b)| *a = b as f64),
            }
            for (&x, w) in row.iter().zip(self.weight.chunks_exact(self.d_out)) {
                let x = x as f64;
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += x * wv as f64;
                }
            }
            out.extend(acc.iter().map(|&a| a as f32));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    /// Closed-form alignment of weight subspaces; never sees any prompt.
    Subspace,
    /// Affine fit on latents of parallel anchor prompts.
    Relative,
}

impl Paradigm {
    pub fn as_str(self) -> &'static str {
        match self {
            Paradigm::Subspace => "subspace",
            Paradigm::Relative => "relative",
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Paradigm {
    type Err = CrdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subspace" => Ok(Paradigm::Subspace),
            "relative" => Ok(Paradigm::Relative),
            other => Err(CrdError::Parameter(format!("unknown paradigm `{other}` (subspace, relative)"))),
        }
    }
}

/// Cache geometry on one side of a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_model: usize,
}

impl LatentShape {
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}

impl From<&ModelConfig> for LatentShape {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_kv_heads: cfg.n_kv_heads,
            d_head: cfg.d_head(),
            d_model: cfg.d_model,
        }
    }
}

/// Fit quality of one mapped family (`hidden`, `keys.<l>`, `values.<l>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyFit {
    pub family: String,
    pub rank: usize,
    /// Frobenius norm of the fit residual.
    pub residual: f64,
    /// Residual divided by the norm of the fit target.
    pub relative_residual: f64,
}

/// A fitted anchor→target translation: one map for the hidden state and one
/// per layer for keys and for values.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub paradigm: Paradigm,
    pub anchor: Fingerprint,
    pub target: Fingerprint,
    pub anchor_shape: LatentShape,
    pub target_shape: LatentShape,
    /// Rank `r` for subspace maps, anchor count `k` for relative maps.
    pub size: usize,
    pub hidden: LinearMap,
    pub keys: Vec<LinearMap>,
    pub values: Vec<LinearMap>,
    pub fits: Vec<FamilyFit>,
    pub warnings: Vec<String>,
}

const KIND: &str = "crd-alignment-map";

impl AlignmentMap {
    /// Content hash used to tag reports produced through this map.
    pub fn id(&self) -> Fingerprint {
        let bytes = self.to_bytes().expect("well-formed map");
        Fingerprint(Sha256::digest(bytes).into())
    }

    fn check_record(&self, record: &CrdRecord) -> Result<()> {
        let a = &self.anchor_shape;
        let c = &record.cache;
        if c.layers.len() != a.n_layers || c.n_kv_heads != a.n_kv_heads || c.d_head != a.d_head || record.d_model() != a.d_model {
            return Err(CrdError::Shape(format!(
                "record `{}` (L={}, kv_heads={}, d_head={}, d_model={}) does not match the map's anchor side \
                 (L={}, kv_heads={}, d_head={}, d_model={})",
                record.id,
                c.layers.len(),
                c.n_kv_heads,
                c.d_head,
                record.d_model(),
                a.n_layers,
                a.n_kv_heads,
                a.d_head,
                a.d_model
            )));
        }
        Ok(())
    }

    /// Maps every cached key row, value row and the penultimate state into the
    /// target's latent space, then stores them at the record's own dtype.
    /// Retained positions and the answer are carried over untouched.
    pub fn translate_record(&self, record: &CrdRecord) -> Result<CrdRecord> {
        self.check_record(record)?;
        let (cache, h) = record.to_release()?;
        let layers = cache
            .layers()
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                Ok(LayerCache {
                    keys: self.keys[l].apply_rows(&layer.keys)?,
                    values: self.values[l].apply_rows(&layer.values)?,
                    positions: layer.positions.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let t = &self.target_shape;
        let mapped = KVCache::from_parts(layers, cache.prompt_len(), t.n_kv_heads, t.d_head)?;
        let h = PenultimateState::new(self.hidden.apply_rows(&h.h)?);
        Ok(CrdRecord::from_release(
            record.id.clone(),
            &mapped,
            &h,
            record.answer.clone(),
            record.dtype(),
        ))
    }

    /// Translates a whole container; its fingerprint must be the map's anchor.
    pub fn translate_file(&self, file: &CrdFile) -> Result<CrdFile> {
        if file.fingerprint != self.anchor {
            return Err(CrdError::Compatibility(format!(
                "file was curated by {} but the map translates from {}",
                file.fingerprint, self.anchor
            )));
        }
        let records = file
            .records
            .par_iter()
            .map(|r| self.translate_record(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(CrdFile {
            fingerprint: self.target,
            records,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut f = TensorFile::new(KIND, 1);
        let shape = |s: &LatentShape| format!("{},{},{},{}", s.n_layers, s.n_kv_heads, s.d_head, s.d_model);
        f.meta.push(("paradigm".into(), self.paradigm.to_string()));
        f.meta.push(("anchor".into(), self.anchor.to_string()));
        f.meta.push(("target".into(), self.target.to_string()));
        f.meta.push(("anchor_shape".into(), shape(&self.anchor_shape)));
        f.meta.push(("target_shape".into(), shape(&self.target_shape)));
        f.meta.push(("size".into(), self.size.to_string()));
        for fit in &self.fits {
            f.meta.push((
                format!("fit.{}", fit.family),
                format!("{} {} {}", fit.rank, fit.residual, fit.relative_residual),
            ));
        }
        for (i, w) in self.warnings.iter().enumerate() {
            f.meta.push((format!("warning.{i}"), w.replace('\n', " ")));
        }
        let mut push = |name: String, m: &LinearMap| {
            f.tensors.push(NamedTensor::new(format!("{name}.weight"), m.d_in, m.d_out, m.weight.clone()));
            if !m.bias.is_empty() {
                f.tensors.push(NamedTensor::new(format!("{name}.bias"), 1, m.d_out, m.bias.clone()));
            }
        };
        push("hidden".into(), &self.hidden);
        for (l, (k, v)) in self.keys.iter().zip(&self.values).enumerate() {
            push(format!("keys.{l}"), k);
            push(format!("values.{l}"), v);
        }
        f.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let f = TensorFile::from_bytes(bytes, KIND)?;
        let parse_shape = |s: &str| -> Result<LatentShape> {
            let v: Vec<usize> = s
                .split(',')
                .map(|p| p.parse().map_err(|_| CrdError::Format(format!("bad shape `{s}`"))))
                .collect::<Result<_>>()?;
            match v.as_slice() {
                &[n_layers, n_kv_heads, d_head, d_model] => Ok(LatentShape {
                    n_layers,
                    n_kv_heads,
                    d_head,
                    d_model,
                }),
                _ => Err(CrdError::Format(format!("bad shape `{s}`"))),
            }
        };
        let anchor_shape = parse_shape(f.require_meta("anchor_shape")?)?;
        let target_shape = parse_shape(f.require_meta("target_shape")?)?;
        let get = |name: &str| -> Result<LinearMap> {
            let w = f.tensor(&format!("{name}.weight"))?;
            let bias = f.tensor(&format!("{name}.bias")).map(|b| b.data.clone()).unwrap_or_default();
            Ok(LinearMap {
                d_in: w.rows,
                d_out: w.cols,
                weight: w.data.clone(),
                bias,
            })
        };
        let mut fits = Vec::new();
        let mut warnings = Vec::new();
        for (k, v) in &f.meta {
            if let Some(family) = k.strip_prefix("fit.") {
                let parts: Vec<&str> = v.split(' ').collect();
                let bad = || CrdError::Format(format!("bad fit entry `{v}`"));
                if parts.len() != 3 {
                    return Err(bad());
                }
                fits.push(FamilyFit {
                    family: family.to_string(),
                    rank: parts[0].parse().map_err(|_| bad())?,
                    residual: parts[1].parse().map_err(|_| bad())?,
                    relative_residual: parts[2].parse().map_err(|_| bad())?,
                });
            } else if k.starts_with("warning.") {
                warnings.push(v.clone());
            }
        }
        Ok(Self {
            paradigm: f.require_meta("paradigm")?.parse()?,
            anchor: f.require_meta("anchor")?.parse()?,
            target: f.require_meta("target")?.parse()?,
            anchor_shape,
            target_shape,
            size: f
                .require_meta("size")?
                .parse()
                .map_err(|_| CrdError::Format("bad size".into()))?,
            hidden: get("hidden")?,
            keys: (0..anchor_shape.n_layers)
                .map(|l| get(&format!("keys.{l}")))
                .collect::<Result<_>>()?,
            values: (0..anchor_shape.n_layers)
                .map(|l| get(&format!("values.{l}")))
                .collect::<Result<_>>()?,
            fits,
            warnings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
