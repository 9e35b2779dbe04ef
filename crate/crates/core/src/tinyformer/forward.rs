//! Per-position decoder block and the full-sequence (training) forward pass.

use crate::error::{CrdError, Result};
use crate::tinyformer::cache::LayerCache;
use crate::tinyformer::config::{Activation, ModelConfig, NormKind, PosEncoding};
use crate::tinyformer::ops::{self, Scalar};
use crate::tinyformer::params::{LayerParams, ModelParams, NormParams};
use crate::tinyformer::tokenizer::TokenSeq;

pub(crate) const NORM_EPS: f64 = 1e-5;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// Row-major `[rows × vocab]` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn last(&self) -> &[T] {
        self.row(self.rows - 1)
    }
}

/// Rotary phase for one position: `cos`/`sin` of `pos · base^(-2i/d_head)`.
#[derive(Debug, Clone)]
pub(crate) struct RopePhase<T> {
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Scalar> RopePhase<T> {
    pub fn new(pos: usize, d_head: usize) -> Self {
        let half = d_head / 2;
        let (cos, sin) = (0..half)
            .map(|i| {
                let freq = ROPE_BASE.powf(-((2 * i) as f64) / d_head as f64);
                let angle = pos as f64 * freq;
                (T::lit(angle.cos()), T::lit(angle.sin()))
            })
            .unzip();
        Self { cos, sin }
    }

    /// Rotates each interleaved pair `(2i, 2i+1)` of every head in `v`.
    pub fn apply(&self, v: &mut [T], d_head: usize) {
        for head in v.chunks_exact_mut(d_head) {
            for (i, (&c, &s)) in self.cos.iter().zip(&self.sin).enumerate() {
                let a = head[2 * i];
                let b = head[2 * i + 1];
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }

    pub fn apply_inverse(&self, v: &mut [T], d_head: usize) {
        for head in v.chunks_exact_mut(d_head) {
            for (i, (&c, &s)) in self.cos.iter().zip(&self.sin).enumerate() {
                let a = head[2 * i];
                let b = head[2 * i + 1];
                head[2 * i] = a * c + b * s;
                head[2 * i + 1] = b * c - a * s;
            }
        }
    }
}

/// Normalizes `x` into `y`, leaving the pre-gain value in `xhat`; returns the inverse scale.
pub(crate) fn norm_forward<T: Scalar>(
    kind: NormKind,
    p: &NormParams<T>,
    x: &[T],
    xhat: &mut [T],
    y: &mut [T],
) -> T {
    let d = T::lit(x.len() as f64);
    let eps = T::lit(NORM_EPS);
    match kind {
        NormKind::Rms => {
            let mut ms = T::zero();
            for &v in x {
                ms = ms + v * v;
            }
            let inv = T::one() / (ms / d + eps).sqrt();
            for i in 0..x.len() {
                xhat[i] = x[i] * inv;
                y[i] = xhat[i] * p.gain[i];
            }
            inv
        }
        NormKind::Layer => {
            let mut mean = T::zero();
            for &v in x {
                mean = mean + v;
            }
            mean = mean / d;
            let mut var = T::zero();
            for &v in x {
                var = var + (v - mean) * (v - mean);
            }
            let inv = T::one() / (var / d + eps).sqrt();
            for i in 0..x.len() {
                xhat[i] = (x[i] - mean) * inv;
                y[i] = xhat[i] * p.gain[i] + p.bias[i];
            }
            inv
        }
    }
}

/// Scratch buffers for one position through one block. After a step they hold
/// every intermediate the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct Workspace<T> {
    pub xhat1: Vec<T>,
    pub inv1: T,
    pub x1: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub o: Vec<T>,
    pub proj: Vec<T>,
    pub xhat2: Vec<T>,
    pub inv2: T,
    pub x2: Vec<T>,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub act: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let z = |n| vec![T::zero(); n];
        Self {
            xhat1: z(d),
            inv1: T::zero(),
            x1: z(d),
            q: z(cfg.q_dim()),
            k: z(cfg.kv_dim()),
            v: z(cfg.kv_dim()),
            probs: Vec::with_capacity(cfg.n_heads * cfg.max_context),
            o: z(cfg.q_dim()),
            proj: z(d),
            xhat2: z(d),
            inv2: T::zero(),
            x2: z(d),
            gate: if cfg.activation == Activation::Swiglu { z(h) } else { Vec::new() },
            up: z(h),
            act: z(h),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn embed_into(&self, tok: u32, pos: usize, h: &mut [T]) {
        h.copy_from_slice(self.embedding_row(tok));
        if self.config.pos_encoding == PosEncoding::LearnedAbsolute {
            let d = self.config.d_model;
            ops::add_assign(h, &self.pos_embed[pos * d..(pos + 1) * d]);
        }
    }

    pub(crate) fn rope(&self, pos: usize) -> Option<RopePhase<T>> {
        match self.config.pos_encoding {
            PosEncoding::Rotary => Some(RopePhase::new(pos, self.config.d_head())),
            PosEncoding::LearnedAbsolute => None,
        }
    }

    /// Pre-attention norm and rotated query for hidden state `h`.
    fn attn_query(&self, lp: &LayerParams<T>, h: &[T], rope: Option<&RopePhase<T>>, ws: &mut Workspace<T>) {
        ws.inv1 = norm_forward(self.config.norm, &lp.attn_norm, h, &mut ws.xhat1, &mut ws.x1);
        ops::vec_mat(&ws.x1, &lp.wq, &mut ws.q);
        if let Some(r) = rope {
            r.apply(&mut ws.q, self.config.d_head());
        }
    }

    /// Key/value projection of the current `ws.x1`.
    fn attn_kv(&self, lp: &LayerParams<T>, rope: Option<&RopePhase<T>>, ws: &mut Workspace<T>) {
        ops::vec_mat(&ws.x1, &lp.wk, &mut ws.k);
        ops::vec_mat(&ws.x1, &lp.wv, &mut ws.v);
        if let Some(r) = rope {
            r.apply(&mut ws.k, self.config.d_head());
        }
    }

    /// Attention of `ws.q` over every row of `layer`, then output projection
    /// and residual add into `h`. Leaves per-head probabilities in `ws.probs`.
    fn attn_apply(&self, lp: &LayerParams<T>, layer: &LayerCache<T>, h: &mut [T], ws: &mut Workspace<T>) {
        let cfg = &self.config;
        let dh = cfg.d_head();
        let kv = cfg.kv_dim();
        let n = layer.len();
        let group = cfg.group_size();
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        ws.probs.clear();
        ws.probs.resize(cfg.n_heads * n, T::zero());
        for head in 0..cfg.n_heads {
            let g = head / group;
            let qh = &ws.q[head * dh..(head + 1) * dh];
            let p = &mut ws.probs[head * n..(head + 1) * n];
            for (j, pj) in p.iter_mut().enumerate() {
                let kj = &layer.keys[j * kv + g * dh..j * kv + (g + 1) * dh];
                *pj = ops::dot(qh, kj) * scale;
            }
            ops::softmax_in_place(p);
            let oh = &mut ws.o[head * dh..(head + 1) * dh];
            oh.fill(T::zero());
            for (j, &pj) in p.iter().enumerate() {
                let vj = &layer.values[j * kv + g * dh..j * kv + (g + 1) * dh];
                ops::axpy(pj, vj, oh);
            }
        }
        ops::vec_mat(&ws.o, &lp.wo, &mut ws.proj);
        ops::add_assign(h, &ws.proj);
    }

    fn ffn_apply(&self, lp: &LayerParams<T>, h: &mut [T], ws: &mut Workspace<T>) {
        ws.inv2 = norm_forward(self.config.norm, &lp.ffn_norm, h, &mut ws.xhat2, &mut ws.x2);
        ops::vec_mat(&ws.x2, &lp.w_up, &mut ws.up);
        match self.config.activation {
            Activation::Gelu => {
                for (a, &u) in ws.act.iter_mut().zip(&ws.up) {
                    *a = ops::gelu(u);
                }
            }
            Activation::Swiglu => {
                ops::vec_mat(&ws.x2, &lp.w_gate, &mut ws.gate);
                for ((a, &u), &g) in ws.act.iter_mut().zip(&ws.up).zip(&ws.gate) {
                    *a = ops::silu(g) * u;
                }
            }
        }
        ops::vec_mat(&ws.act, &lp.w_down, &mut ws.proj);
        ops::add_assign(h, &ws.proj);
    }

    /// Runs block `l` for a new position: appends its key/value to `layer`,
    /// attends over everything held, and updates `h` in place.
    pub(crate) fn block_step(
        &self,
        l: usize,
        h: &mut [T],
        pos: usize,
        rope: Option<&RopePhase<T>>,
        layer: &mut LayerCache<T>,
        ws: &mut Workspace<T>,
    ) {
        let lp = &self.layers[l];
        self.attn_query(lp, h, rope, ws);
        self.attn_kv(lp, rope, ws);
        layer.keys.extend_from_slice(&ws.k);
        layer.values.extend_from_slice(&ws.v);
        layer.positions.push(pos as u32);
        self.attn_apply(lp, layer, h, ws);
        self.ffn_apply(lp, h, ws);
    }

    /// Runs block `l` for a position whose key/value is already in `layer`.
    pub(crate) fn block_step_query_only(
        &self,
        l: usize,
        h: &mut [T],
        rope: Option<&RopePhase<T>>,
        layer: &LayerCache<T>,
        ws: &mut Workspace<T>,
    ) {
        let lp = &self.layers[l];
        self.attn_query(lp, h, rope, ws);
        self.attn_apply(lp, layer, h, ws);
        self.ffn_apply(lp, h, ws);
    }

    /// Final norm and LM head. Returns the normalized state alongside the logits.
    pub(crate) fn head(&self, h: &[T], xhat: &mut [T], xf: &mut [T], logits: &mut [T]) -> T {
        let inv = norm_forward(self.config.norm, &self.final_norm, h, xhat, xf);
        ops::vec_mat(xf, &self.lm_head, logits);
        inv
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_context {
            return Err(CrdError::Length {
                len: tokens.len(),
                max: cfg.max_context,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(CrdError::Vocab {
                id,
                vocab: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Full-sequence forward pass. Row `i` of the result predicts token `i + 1`
    /// and depends only on tokens `0..=i`.
    pub fn forward_train(&self, tokens: &TokenSeq) -> Result<Logits<T>> {
        Ok(self.forward_taped(tokens.ids(), false)?.0)
    }

    pub(crate) fn forward_taped(&self, tokens: &[u32], record: bool) -> Result<(Logits<T>, Option<Tape<T>>)> {
        if tokens.is_empty() {
            return Err(CrdError::Empty("token sequence".into()));
        }
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (t, d, v) = (tokens.len(), cfg.d_model, cfg.vocab_size);
        let mut hidden = vec![T::zero(); t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            self.embed_into(tok, i, &mut hidden[i * d..(i + 1) * d]);
        }
        let ropes: Vec<Option<RopePhase<T>>> = (0..t).map(|i| self.rope(i)).collect();
        let mut ws = Workspace::new(cfg);
        let mut tape = record.then(|| Tape::new(cfg, tokens));
        for l in 0..cfg.n_layers {
            let mut layer = LayerCache::default();
            for i in 0..t {
                let h = &mut hidden[i * d..(i + 1) * d];
                self.block_step(l, h, i, ropes[i].as_ref(), &mut layer, &mut ws);
                if let Some(tape) = tape.as_mut() {
                    tape.layers[l].record(i, &ws);
                }
            }
            if let Some(tape) = tape.as_mut() {
                tape.layers[l].keys = layer.keys;
                tape.layers[l].values = layer.values;
            }
        }
        let mut logits = vec![T::zero(); t * v];
        let mut xhat = vec![T::zero(); d];
        let mut xf = vec![T::zero(); d];
        for i in 0..t {
            let inv = self.head(&hidden[i * d..(i + 1) * d], &mut xhat, &mut xf, &mut logits[i * v..(i + 1) * v]);
            if let Some(tape) = tape.as_mut() {
                tape.xhatf[i * d..(i + 1) * d].copy_from_slice(&xhat);
                tape.xf[i * d..(i + 1) * d].copy_from_slice(&xf);
                tape.invf[i] = inv;
            }
        }
        Ok((Logits { rows: t, vocab: v, data: logits }, tape))
    }
}

/// Activations of one block for every position of a sequence.
#[derive(Debug, Clone)]
pub(crate) struct LayerTape<T> {
    pub xhat1: Vec<T>,
    pub inv1: Vec<T>,
    pub x1: Vec<T>,
    pub q: Vec<T>,
    pub keys: Vec<T>,
    pub values: Vec<T>,
    /// Per position `i`: `[n_heads × (i + 1)]`.
    pub probs: Vec<Vec<T>>,
    pub o: Vec<T>,
    pub xhat2: Vec<T>,
    pub inv2: Vec<T>,
    pub x2: Vec<T>,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub act: Vec<T>,
}

impl<T: Scalar> LayerTape<T> {
    fn new(cfg: &ModelConfig, t: usize) -> Self {
        let d = cfg.d_model;
        let h = cfg.ffn_hidden();
        let z = |n| vec![T::zero(); n];
        Self {
            xhat1: z(t * d),
            inv1: z(t),
            x1: z(t * d),
            q: z(t * cfg.q_dim()),
            keys: Vec::new(),
            values: Vec::new(),
            probs: Vec::with_capacity(t),
            o: z(t * cfg.q_dim()),
            xhat2: z(t * d),
            inv2: z(t),
            x2: z(t * d),
            gate: if cfg.activation == Activation::Swiglu { z(t * h) } else { Vec::new() },
            up: z(t * h),
            act: z(t * h),
        }
    }

    fn record(&mut self, i: usize, ws: &Workspace<T>) {
        let put = |dst: &mut Vec<T>, src: &[T]| {
            let n = src.len();
            dst[i * n..(i + 1) * n].copy_from_slice(src);
        };
        put(&mut self.xhat1, &ws.xhat1);
        self.inv1[i] = ws.inv1;
        put(&mut self.x1, &ws.x1);
        put(&mut self.q, &ws.q);
        self.probs.push(ws.probs.clone());
        put(&mut self.o, &ws.o);
        put(&mut self.xhat2, &ws.xhat2);
        self.inv2[i] = ws.inv2;
        put(&mut self.x2, &ws.x2);
        if !ws.gate.is_empty() {
            put(&mut self.gate, &ws.gate);
        }
        put(&mut self.up, &ws.up);
        put(&mut self.act, &ws.act);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Tape<T> {
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerTape<T>>,
    pub xhatf: Vec<T>,
    pub invf: Vec<T>,
    pub xf: Vec<T>,
}

impl<T: Scalar> Tape<T> {
    fn new(cfg: &ModelConfig, tokens: &[u32]) -> Self {
        let t = tokens.len();
        Self {
            tokens: tokens.to_vec(),
            layers: (0..cfg.n_layers).map(|_| LayerTape::new(cfg, t)).collect(),
            xhatf: vec![T::zero(); t * cfg.d_model],
            invf: vec![T::zero(); t],
            xf: vec![T::zero(); t * cfg.d_model],
        }
    }
}
