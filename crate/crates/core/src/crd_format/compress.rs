use crate::error::{CrdError, Result};
use crate::tinyformer::{AttentionScores, KVCache, LayerCache};

/// Number of positions kept out of `t` at retain fraction `p` (never fewer than one).
pub fn retained_count(t: usize, p: f64) -> usize {
    ((p * t as f64 - 1e-9).ceil() as usize).clamp(1, t)
}

/// Drops cache rows per layer, keeping the final prompt position plus the
/// highest-scoring others so that `⌈p·t⌉` rows survive. Ties go to the more
/// recent position. Positions already dropped stay dropped, so applying the
/// same `p` and scores twice changes nothing.
pub fn compress_cache<T: Copy>(cache: &KVCache<T>, p: f64, scores: &AttentionScores) -> Result<KVCache<T>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(CrdError::Parameter(format!("retain fraction must be in (0, 1], got {p}")));
    }
    let t = cache.prompt_len();
    if !cache.is_fresh() {
        return Err(CrdError::Validation("cannot compress a cache that already holds generated positions".into()));
    }
    if scores.per_layer.len() != cache.n_layers() || scores.per_layer.iter().any(|s| s.len() != t) {
        return Err(CrdError::Shape(format!(
            "scores must cover {} layers × {t} positions",
            cache.n_layers()
        )));
    }
    let keep = retained_count(t, p);
    let row = cache.kv_dim();
    let layers = cache
        .layers()
        .iter()
        .zip(&scores.per_layer)
        .map(|(layer, s)| {
            let last = t as u32 - 1;
            let mut candidates: Vec<usize> = (0..layer.len()).filter(|&i| layer.positions[i] != last).collect();
            candidates.sort_by(|&a, &b| {
                let (pa, pb) = (layer.positions[a], layer.positions[b]);
                s[pb as usize]
                    .total_cmp(&s[pa as usize])
                    .then_with(|| pb.cmp(&pa))
            });
            candidates.truncate(keep - 1);
            candidates.push(layer.len() - 1);
            candidates.sort_unstable();
            let mut out = LayerCache::default();
            for i in candidates {
                out.keys.extend_from_slice(&layer.keys[i * row..(i + 1) * row]);
                out.values.extend_from_slice(&layer.values[i * row..(i + 1) * row]);
                out.positions.push(layer.positions[i]);
            }
            out
        })
        .collect();
    KVCache::from_parts(layers, t, cache.n_kv_heads(), cache.d_head())
}

/// Fraction of prompt cache rows kept across all layers.
pub fn kept_fraction<T: Copy>(cache: &KVCache<T>) -> f64 {
    let total = cache.n_layers() * cache.prompt_len();
    let kept: usize = cache.layers().iter().map(|l| l.len()).sum();
    kept as f64 / total as f64
}
