//! Cache-resumed inference: prefill a prompt into a [`KVCache`] and
//! [`PenultimateState`], then decode from those alone.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrdError, Result};
use crate::tinyformer::cache::{AttentionScores, CacheScoring, KVCache, PenultimateState};
use crate::tinyformer::config::ModelConfig;
use crate::tinyformer::forward::Workspace;
use crate::tinyformer::ops::{self, Scalar};
use crate::tinyformer::params::ModelParams;
use crate::tinyformer::tokenizer::{TokenSeq, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DecodeMode {
    Greedy,
    /// Softmax sampling at temperature `tau`; `tau <= 0` falls back to greedy.
    Temperature { tau: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSettings {
    pub max_new: usize,
    pub stop_token: Option<u32>,
    pub mode: DecodeMode,
}

impl Default for GenSettings {
    fn default() -> Self {
        Self {
            max_new: 16,
            stop_token: Some(EOS),
            mode: DecodeMode::Greedy,
        }
    }
}

impl GenSettings {
    pub fn greedy(max_new: usize) -> Self {
        Self {
            max_new,
            ..Self::default()
        }
    }
}

/// One decoded token together with the logits it was chosen from.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<T> {
    pub token: u32,
    pub logits: Vec<T>,
}

struct Sampler {
    rng: Option<(ChaCha8Rng, f64)>,
}

impl Sampler {
    fn new(mode: DecodeMode) -> Self {
        match mode {
            DecodeMode::Temperature { tau, seed } if tau > 0.0 => Self {
                rng: Some((ChaCha8Rng::seed_from_u64(seed), tau)),
            },
            _ => Self { rng: None },
        }
    }

    fn pick<T: Scalar>(&mut self, logits: &[T]) -> u32 {
        match self.rng.as_mut() {
            None => ops::argmax(logits) as u32,
            Some((rng, tau)) => {
                let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|x| ((x.as_f64() - max) / *tau).exp()).collect();
                match WeightedIndex::new(&weights) {
                    Ok(dist) => dist.sample(rng) as u32,
                    Err(_) => ops::argmax(logits) as u32,
                }
            }
        }
    }
}

/// The two cache-resumed entry points, abstracted so callers can be audited
/// with an instrumented stand-in.
pub trait CacheDecoder<T: Scalar>: Sync {
    fn config(&self) -> &ModelConfig;

    fn decode_first(&self, cache: &KVCache<T>, h: &PenultimateState<T>) -> Result<Step<T>>;

    fn decode_step(&self, cache: &mut KVCache<T>, prev_token: u32) -> Result<Step<T>>;
}

impl<T: Scalar> CacheDecoder<T> for ModelParams<T> {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn decode_first(&self, cache: &KVCache<T>, h: &PenultimateState<T>) -> Result<Step<T>> {
        ModelParams::decode_first(self, cache, h)
    }

    fn decode_step(&self, cache: &mut KVCache<T>, prev_token: u32) -> Result<Step<T>> {
        ModelParams::decode_step(self, cache, prev_token)
    }
}

/// Generates from the released form: `decode_first` then `decode_step` until
/// the stop token (kept in the output) or `max_new` tokens.
pub fn generate_with<T: Scalar, D: CacheDecoder<T> + ?Sized>(
    decoder: &D,
    cache: &mut KVCache<T>,
    h: &PenultimateState<T>,
    settings: &GenSettings,
) -> Result<TokenSeq> {
    if settings.max_new == 0 {
        return Err(CrdError::Parameter("max_new must be at least 1".into()));
    }
    let mut sampler = Sampler::new(settings.mode);
    let first = decoder.decode_first(cache, h)?;
    let mut tok = sampler.pick(&first.logits);
    let mut out = vec![tok];
    while out.len() < settings.max_new && Some(tok) != settings.stop_token {
        let step = decoder.decode_step(cache, tok)?;
        tok = sampler.pick(&step.logits);
        out.push(tok);
    }
    Ok(TokenSeq::new(out))
}

impl<T: Scalar> ModelParams<T> {
    /// See [`generate_with`].
    pub fn generate(
        &self,
        cache: &mut KVCache<T>,
        h: &PenultimateState<T>,
        settings: &GenSettings,
    ) -> Result<TokenSeq> {
        generate_with(self, cache, h, settings)
    }

    /// Processes `prompt` and returns its key/value cache and the input to
    /// the last block at the final prompt position.
    pub fn prefill(&self, prompt: &TokenSeq) -> Result<(KVCache<T>, PenultimateState<T>)> {
        let (cache, h, _) = self.prefill_inner(prompt, None, None)?;
        Ok((cache, h))
    }

    /// [`Self::prefill`] that also returns the input to the last block at
    /// every prompt position (the last row equals the penultimate state).
    pub fn prefill_with_block_inputs(&self, prompt: &TokenSeq) -> Result<(KVCache<T>, Vec<Vec<T>>)> {
        let mut inputs = Vec::with_capacity(prompt.len());
        let (cache, _, _) = self.prefill_inner(prompt, None, Some(&mut inputs))?;
        Ok((cache, inputs))
    }

    /// [`Self::prefill`] plus, per layer, the attention mass each prompt
    /// position receives from the final prompt query (summed over heads).
    pub fn prefill_with_scores(
        &self,
        prompt: &TokenSeq,
        scoring: CacheScoring,
    ) -> Result<(KVCache<T>, PenultimateState<T>, AttentionScores)> {
        let (cache, h, scores) = self.prefill_inner(prompt, Some(scoring), None)?;
        Ok((cache, h, scores.expect("scores requested")))
    }

    fn prefill_inner(
        &self,
        prompt: &TokenSeq,
        scoring: Option<CacheScoring>,
        mut block_inputs: Option<&mut Vec<Vec<T>>>,
    ) -> Result<(KVCache<T>, PenultimateState<T>, Option<AttentionScores>)> {
        if prompt.is_empty() {
            return Err(CrdError::Empty("prompt".into()));
        }
        self.check_tokens(prompt.ids())?;
        let cfg = &self.config;
        let t = prompt.len();
        let mut cache = KVCache::empty(cfg);
        let mut ws = Workspace::new(cfg);
        let mut h = vec![T::zero(); cfg.d_model];
        let mut penult = Vec::new();
        let mut scores = scoring.map(|_| AttentionScores {
            per_layer: vec![vec![0.0; t]; cfg.n_layers],
        });
        for (pos, &tok) in prompt.ids().iter().enumerate() {
            self.embed_into(tok, pos, &mut h);
            let rope = self.rope(pos);
            for l in 0..cfg.n_layers {
                if l + 1 == cfg.n_layers {
                    if let Some(inputs) = block_inputs.as_mut() {
                        inputs.push(h.clone());
                    }
                    if pos + 1 == t {
                        penult = h.clone();
                    }
                }
                self.block_step(l, &mut h, pos, rope.as_ref(), &mut cache.layers[l], &mut ws);
                if pos + 1 == t || scoring == Some(CacheScoring::Accumulated) {
                    if let Some(s) = scores.as_mut() {
                        let row = &mut s.per_layer[l];
                        for head in ws.probs.chunks_exact(pos + 1) {
                            for (acc, p) in row.iter_mut().zip(head) {
                                *acc += p.as_f64();
                            }
                        }
                    }
                }
            }
        }
        cache.prompt_len = t;
        cache.next_pos = t;
        Ok((cache, PenultimateState::new(penult), scores))
    }

    /// First generated token from the released form: the final prompt
    /// position's query at the last block, attending over that block's cache.
    /// The cache is not extended.
    pub fn decode_first(&self, cache: &KVCache<T>, h: &PenultimateState<T>) -> Result<Step<T>> {
        let cfg = &self.config;
        cache.check_config(cfg)?;
        if h.dim() != cfg.d_model {
            return Err(CrdError::Shape(format!(
                "penultimate state has {} values, model width is {}",
                h.dim(),
                cfg.d_model
            )));
        }
        let last = cfg.n_layers - 1;
        let layer = cache.layer(last);
        if layer.is_empty() || cache.prompt_len == 0 {
            return Err(CrdError::Empty("cache".into()));
        }
        let pos = cache.prompt_len - 1;
        let mut ws = Workspace::new(cfg);
        let mut x = h.h.clone();
        let rope = self.rope(pos);
        self.block_step_query_only(last, &mut x, rope.as_ref(), layer, &mut ws);
        let mut logits = vec![T::zero(); cfg.vocab_size];
        let (mut xhat, mut xf) = (vec![T::zero(); cfg.d_model], vec![T::zero(); cfg.d_model]);
        self.head(&x, &mut xhat, &mut xf, &mut logits);
        Ok(Step {
            token: ops::argmax(&logits) as u32,
            logits,
        })
    }

    /// Feeds `prev_token` at the cache's next position through every block,
    /// appending one key/value row per layer.
    pub fn decode_step(&self, cache: &mut KVCache<T>, prev_token: u32) -> Result<Step<T>> {
        let cfg = &self.config;
        cache.check_config(cfg)?;
        self.check_tokens(&[prev_token])?;
        let pos = cache.next_pos;
        if pos >= cfg.max_context {
            return Err(CrdError::ContextOverflow {
                pos,
                max: cfg.max_context,
            });
        }
        let mut ws = Workspace::new(cfg);
        let mut h = vec![T::zero(); cfg.d_model];
        self.embed_into(prev_token, pos, &mut h);
        let rope = self.rope(pos);
        for l in 0..cfg.n_layers {
            self.block_step(l, &mut h, pos, rope.as_ref(), &mut cache.layers[l], &mut ws);
        }
        cache.next_pos = pos + 1;
        let mut logits = vec![T::zero(); cfg.vocab_size];
        let (mut xhat, mut xf) = (vec![T::zero(); cfg.d_model], vec![T::zero(); cfg.d_model]);
        self.head(&h, &mut xhat, &mut xf, &mut logits);
        Ok(Step {
            token: ops::argmax(&logits) as u32,
            logits,
        })
    }

    /// Reference generation that never touches a cache: every token comes
    /// from a fresh full-sequence forward pass over the growing plaintext.
    pub fn generate_uncached(&self, prompt: &TokenSeq, settings: &GenSettings) -> Result<TokenSeq> {
        if settings.max_new == 0 {
            return Err(CrdError::Parameter("max_new must be at least 1".into()));
        }
        let mut sampler = Sampler::new(settings.mode);
        let mut seq = prompt.clone();
        let mut out = Vec::new();
        loop {
            let logits = self.forward_train(&seq)?;
            let tok = sampler.pick(logits.last());
            out.push(tok);
            if out.len() >= settings.max_new || Some(tok) == settings.stop_token {
                break;
            }
            if seq.len() >= self.config.max_context {
                return Err(CrdError::ContextOverflow {
                    pos: seq.len(),
                    max: self.config.max_context,
                });
            }
            seq.push(tok);
        }
        Ok(TokenSeq::new(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::config::ModelConfig;

    fn small() -> ModelParams<f32> {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            max_context: 12,
            seed: 11,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg).unwrap()
    }

    #[test]
    fn prefill_shapes() {
        let p = small();
        let (cache, h) = p.prefill(&TokenSeq::prompt("abcd")).unwrap();
        assert_eq!(cache.n_layers(), 2);
        for layer in cache.layers() {
            assert_eq!(layer.keys.len(), 5 * 2 * 4);
            assert_eq!(layer.positions, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(h.dim(), 16);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        assert!(matches!(small().prefill(&TokenSeq::new(vec![])), Err(CrdError::Empty(_))));
    }

    #[test]
    fn wrong_width_state_is_rejected() {
        let p = small();
        let (cache, _) = p.prefill(&TokenSeq::prompt("ab")).unwrap();
        let bad = PenultimateState::new(vec![0.0f32; 15]);
        assert!(matches!(p.decode_first(&cache, &bad), Err(CrdError::Shape(_))));
    }

    #[test]
    fn decode_step_appends_one_row_and_overflows_at_context() {
        let p = small();
        let (mut cache, _) = p.prefill(&TokenSeq::prompt("abcdefghij")).unwrap();
        assert_eq!(cache.next_pos(), 11);
        p.decode_step(&mut cache, 65).unwrap();
        assert!(cache.layers().iter().all(|l| l.len() == 12));
        assert!(matches!(
            p.decode_step(&mut cache, 65),
            Err(CrdError::ContextOverflow { pos: 12, max: 12 })
        ));
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let p = small();
        let prompt = TokenSeq::prompt("xy");
        let (cache, h) = p.prefill(&prompt).unwrap();
        let greedy = p.generate(&mut cache.clone(), &h, &GenSettings::greedy(4)).unwrap();
        let cold = GenSettings {
            mode: DecodeMode::Temperature { tau: 0.0, seed: 5 },
            ..GenSettings::greedy(4)
        };
        assert_eq!(p.generate(&mut cache.clone(), &h, &cold).unwrap(), greedy);
    }

    #[test]
    fn single_token_generation_is_decode_first() {
        let p = small();
        let (mut cache, h) = p.prefill(&TokenSeq::prompt("q")).unwrap();
        let first = p.decode_first(&cache, &h).unwrap().token;
        let out = p.generate(&mut cache, &h, &GenSettings::greedy(1)).unwrap();
        assert_eq!(out.ids(), &[first]);
    }
}
