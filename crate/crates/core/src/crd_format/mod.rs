//! The released form of a benchmark: records, the dataset container, its
//! datacard sidecar, and the compression and quantization applied before release.

pub mod compress;
pub mod datacard;
pub mod file;
pub mod payload;
pub mod record;
pub mod storage;

pub use crate::tinyformer::CacheScoring;
pub use compress::{compress_cache, kept_fraction, retained_count};
pub use datacard::{datacard_path, AnchorInfo, CalibrationSample, CompressionInfo, Datacard};
pub use file::{CrdFile, MAGIC, VERSION};
pub use payload::{q8_scale, quantize_cache, DType, Payload, QuantizedCache, StoredLayer};
pub use record::{decode_record, encode_record, CrdRecord, FieldKind, RECORD_FIELDS};
pub use storage::{estimate_storage, StorageEstimate, StorageShape};
