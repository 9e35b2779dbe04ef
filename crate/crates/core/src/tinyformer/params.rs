use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CrdError, Result};
use crate::tinyformer::config::{Activation, ModelConfig, NormKind, PosEncoding};
use crate::tinyformer::ops::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Vec<T>,
    /// Empty for RMS norm.
    pub bias: Vec<T>,
}

/// One decoder block. Matrices are row-major `[in × out]` so a row vector
/// multiplies from the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: NormParams<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm: NormParams<T>,
    /// Empty unless the activation is SwiGLU.
    pub w_gate: Vec<T>,
    pub w_up: Vec<T>,
    pub w_down: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    /// `[V × d_model]`
    pub tok_embed: Vec<T>,
    /// `[T_max × d_model]`, empty for rotary models.
    pub pos_embed: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: NormParams<T>,
    /// `[d_model × V]`
    pub lm_head: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every non-empty parameter tensor in the declared (checkpoint) order.
pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let d = cfg.d_model;
    let h = cfg.ffn_hidden();
    let layer_norm = cfg.norm == NormKind::Layer;
    let mut specs = vec![TensorSpec::new("tok_embed", cfg.vocab_size, d)];
    if cfg.pos_encoding == PosEncoding::LearnedAbsolute {
        specs.push(TensorSpec::new("pos_embed", cfg.max_context, d));
    }
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        specs.push(TensorSpec::new(p("attn_norm.gain"), 1, d));
        if layer_norm {
            specs.push(TensorSpec::new(p("attn_norm.bias"), 1, d));
        }
        specs.push(TensorSpec::new(p("wq"), d, cfg.q_dim()));
        specs.push(TensorSpec::new(p("wk"), d, cfg.kv_dim()));
        specs.push(TensorSpec::new(p("wv"), d, cfg.kv_dim()));
        specs.push(TensorSpec::new(p("wo"), cfg.q_dim(), d));
        specs.push(TensorSpec::new(p("ffn_norm.gain"), 1, d));
        if layer_norm {
            specs.push(TensorSpec::new(p("ffn_norm.bias"), 1, d));
        }
        if cfg.activation == Activation::Swiglu {
            specs.push(TensorSpec::new(p("w_gate"), d, h));
        }
        specs.push(TensorSpec::new(p("w_up"), d, h));
        specs.push(TensorSpec::new(p("w_down"), h, d));
    }
    specs.push(TensorSpec::new("final_norm.gain", 1, d));
    if layer_norm {
        specs.push(TensorSpec::new("final_norm.bias", 1, d));
    }
    specs.push(TensorSpec::new("lm_head", d, cfg.vocab_size));
    specs
}

fn norm_zeros<T: Scalar>(cfg: &ModelConfig) -> NormParams<T> {
    NormParams {
        gain: vec![T::zero(); cfg.d_model],
        bias: match cfg.norm {
            NormKind::Layer => vec![T::zero(); cfg.d_model],
            NormKind::Rms => Vec::new(),
        },
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with the shapes implied by `cfg` (used for gradients).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let z = |n: usize| vec![T::zero(); n];
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: norm_zeros(cfg),
                wq: z(d * cfg.q_dim()),
                wk: z(d * cfg.kv_dim()),
                wv: z(d * cfg.kv_dim()),
                wo: z(cfg.q_dim() * d),
                ffn_norm: norm_zeros(cfg),
                w_gate: match cfg.activation {
                    Activation::Swiglu => z(d * h),
                    Activation::Gelu => Vec::new(),
                },
                w_up: z(d * h),
                w_down: z(h * d),
            })
            .collect();
        Self {
            config: cfg.clone(),
            tok_embed: z(cfg.vocab_size * d),
            pos_embed: match cfg.pos_encoding {
                PosEncoding::LearnedAbsolute => z(cfg.max_context * d),
                PosEncoding::Rotary => Vec::new(),
            },
            layers,
            final_norm: norm_zeros(cfg),
            lm_head: z(d * cfg.vocab_size),
        }
    }

    /// Deterministic initialization: norm gains 1, biases 0, every matrix
    /// drawn from `N(0, 1/d_model)`, in declared tensor order.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = Self::zeros(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f64, 1.0 / (cfg.d_model as f64).sqrt())
            .map_err(|e| CrdError::Config(e.to_string()))?;
        let specs = tensor_specs(cfg);
        for (spec, tensor) in specs.iter().zip(params.tensors_mut()) {
            if spec.name.ends_with(".gain") {
                tensor.fill(T::one());
            } else if spec.name.ends_with(".bias") {
                tensor.fill(T::zero());
            } else {
                for v in tensor.iter_mut() {
                    *v = T::lit(normal.sample(&mut rng));
                }
            }
        }
        Ok(params)
    }

    /// Builds parameters from tensors listed in declared order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        cfg.validate()?;
        let specs = tensor_specs(cfg);
        if specs.len() != tensors.len() {
            return Err(CrdError::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Self::zeros(cfg);
        for ((spec, slot), t) in specs.iter().zip(params.tensors_mut()).zip(tensors) {
            if t.len() != spec.len() {
                return Err(CrdError::Shape(format!(
                    "tensor {} has {} values, expected {}",
                    spec.name,
                    t.len(),
                    spec.len()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out: Vec<&Vec<T>> = vec![&self.tok_embed, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.attn_norm.gain,
                &l.attn_norm.bias,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_norm.gain,
                &l.ffn_norm.bias,
                &l.w_gate,
                &l.w_up,
                &l.w_down,
            ]);
        }
        out.extend([&self.final_norm.gain, &self.final_norm.bias, &self.lm_head]);
        out.retain(|t| !t.is_empty());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm.gain,
                &mut l.attn_norm.bias,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn_norm.gain,
                &mut l.ffn_norm.bias,
                &mut l.w_gate,
                &mut l.w_up,
                &mut l.w_down,
            ]);
        }
        out.extend([
            &mut self.final_norm.gain,
            &mut self.final_norm.bias,
            &mut self.lm_head,
        ]);
        out.retain(|t| !t.is_empty());
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| t.iter().map(|&v| U::lit(v.as_f64())).collect())
            .collect();
        ModelParams::from_tensors(&self.config, tensors).expect("same config, same shapes")
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Row `tok` of the token embedding.
    pub fn embedding_row(&self, tok: u32) -> &[T] {
        let d = self.config.d_model;
        let i = tok as usize;
        &self.tok_embed[i * d..(i + 1) * d]
    }
}
