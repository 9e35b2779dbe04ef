use thiserror::Error;

pub type Result<T, E = CrdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrdError {
    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds maximum context {max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    Vocab { id: u32, vocab: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("context overflow: position {pos} would exceed maximum context {max}")]
    ContextOverflow { pos: usize, max: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("corruption detected: {0}")]
    Corruption(String),

    #[error("unsupported format version {0}")]
    Version(u16),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("incompatible model: {0}")]
    Compatibility(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CrdError {
    /// True for errors caused by bad inputs rather than by the runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CrdError::Config(_)
                | CrdError::Length { .. }
                | CrdError::Vocab { .. }
                | CrdError::Shape(_)
                | CrdError::Empty(_)
                | CrdError::Format(_)
                | CrdError::Version(_)
                | CrdError::Parameter(_)
                | CrdError::Rank(_)
                | CrdError::Compatibility(_)
                | CrdError::Validation(_)
                | CrdError::Parse { .. }
        )
    }
}
