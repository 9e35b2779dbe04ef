use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{CrdError, Result};
use crate::tensorfile::{NamedTensor, TensorFile};
use crate::tinyformer::cache::{KVCache, PenultimateState};
use crate::tinyformer::config::ModelConfig;
use crate::tinyformer::infer::{CacheDecoder, Step};
use crate::tinyformer::params::{tensor_specs, ModelParams};

const KIND: &str = "tinyformer-checkpoint";
const VERSION: u32 = 1;

/// Identity of a model: SHA-256 over its canonical config text followed by
/// the little-endian checkpoint payload checksum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for Fingerprint {
    type Err = CrdError;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| CrdError::Format(format!("bad fingerprint: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| CrdError::Format("fingerprint must be 32 bytes".into()))?;
        Ok(Fingerprint(arr))
    }
}

impl serde::Serialize for Fingerprint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for Fingerprint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn to_file(params: &ModelParams<f32>) -> TensorFile {
    let cfg = &params.config;
    let mut file = TensorFile::new(KIND, VERSION);
    file.meta = cfg
        .to_kv_text()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    file.tensors = tensor_specs(cfg)
        .into_iter()
        .zip(params.tensors())
        .map(|(spec, t)| NamedTensor::new(spec.name, spec.rows, spec.cols, t.clone()))
        .collect();
    file
}

pub fn fingerprint(params: &ModelParams<f32>) -> Fingerprint {
    let mut hasher = Sha256::new();
    hasher.update(params.config.to_kv_text().as_bytes());
    hasher.update(to_file(params).checksum().to_le_bytes());
    Fingerprint(hasher.finalize().into())
}

pub fn checkpoint_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    to_file(params).to_bytes().expect("shapes follow config")
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let file = TensorFile::from_bytes(bytes, KIND)?;
    if file.version != VERSION {
        return Err(CrdError::Version(file.version as u16));
    }
    let lines: Vec<String> = file.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let cfg = ModelConfig::from_kv_lines(lines.iter().map(String::as_str))?;
    let specs = tensor_specs(&cfg);
    if specs.len() != file.tensors.len() {
        return Err(CrdError::Format(format!(
            "checkpoint lists {} tensors, config implies {}",
            file.tensors.len(),
            specs.len()
        )));
    }
    for (spec, t) in specs.iter().zip(&file.tensors) {
        if spec.name != t.name || spec.rows != t.rows || spec.cols != t.cols {
            return Err(CrdError::Format(format!(
                "tensor `{}` {}x{} where `{}` {}x{} expected",
                t.name, t.rows, t.cols, spec.name, spec.rows, spec.cols
            )));
        }
    }
    let params = ModelParams::from_tensors(&cfg, file.tensors.into_iter().map(|t| t.data).collect())?;
    if !params.all_finite() {
        return Err(CrdError::Format("checkpoint holds non-finite values".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    parse_checkpoint(&std::fs::read(path)?)
}

/// Frozen 32-bit parameters paired with their fingerprint.
#[derive(Debug, Clone)]
pub struct Model {
    params: ModelParams<f32>,
    fingerprint: Fingerprint,
}

impl Model {
    pub fn new(params: ModelParams<f32>) -> Self {
        let fingerprint = fingerprint(&params);
        Self { params, fingerprint }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(load_checkpoint(path)?))
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }
}

impl CacheDecoder<f32> for Model {
    fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    fn decode_first(&self, cache: &KVCache<f32>, h: &PenultimateState<f32>) -> Result<Step<f32>> {
        self.params.decode_first(cache, h)
    }

    fn decode_step(&self, cache: &mut KVCache<f32>, prev_token: u32) -> Result<Step<f32>> {
        self.params.decode_step(cache, prev_token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinyformer::config::{NormKind, PosEncoding};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            max_context: 16,
            norm: NormKind::Layer,
            pos_encoding: PosEncoding::LearnedAbsolute,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        let back = parse_checkpoint(&checkpoint_bytes(&p)).unwrap();
        assert_eq!(p, back);
        assert_eq!(fingerprint(&p), fingerprint(&back));
    }

    #[test]
    fn fingerprint_tracks_weights_and_config() {
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        let mut q = p.clone();
        q.lm_head[3] += 1.0;
        assert_ne!(fingerprint(&p), fingerprint(&q));
        let r = ModelParams::<f32>::init(&ModelConfig { seed: 1, ..cfg() }).unwrap();
        assert_ne!(fingerprint(&p), fingerprint(&r));
    }

    #[test]
    fn fingerprint_hex_round_trip() {
        let fp = fingerprint(&ModelParams::<f32>::init(&cfg()).unwrap());
        assert_eq!(fp.to_string().parse::<Fingerprint>().unwrap(), fp);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let p = ModelParams::<f32>::init(&cfg()).unwrap();
        let mut bytes = checkpoint_bytes(&p);
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        assert!(matches!(parse_checkpoint(&bytes), Err(CrdError::Corruption(_))));
    }
}
