use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("selector {selector} matched {matches} objects")]
    UnresolvableSelector { selector: String, matches: usize },
    #[error("scene would hold {0} objects (max 4)")]
    CapacityExceeded(usize),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid edit script: {0}")]
    InvalidScript(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("empty sequence")]
    EmptySequence,
    #[error("degenerate query: norm {0:e} below 1e-12")]
    DegenerateQuery(f64),
    #[error("sequence of length {len} exceeds context limit {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("zero-norm embedding in contrastive batch")]
    DegenerateEmbedding,
    #[error("non-finite loss at epoch {epoch} step {step} (contrastive {contrastive}, key {key})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        contrastive: f64,
        key: f64,
    },
    #[error("zero embedding for candidate {0}")]
    ZeroEmbedding(usize),
    #[error("subset metrics requested without a subset map")]
    MissingSubset,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed corpus file: {0}")]
    CorpusFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::UnresolvableSelector { .. } => "UnresolvableSelector",
            Error::CapacityExceeded(_) => "CapacityExceeded",
            Error::InvalidScene(_) => "InvalidScene",
            Error::InvalidScript(_) => "InvalidScript",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::EmptySequence => "EmptySequence",
            Error::DegenerateQuery(_) => "DegenerateQuery",
            Error::ContextOverflow { .. } => "ContextOverflow",
            Error::DegenerateEmbedding => "DegenerateEmbedding",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::ZeroEmbedding(_) => "ZeroEmbedding",
            Error::MissingSubset => "MissingSubset",
            Error::Checkpoint(_) => "Checkpoint",
            Error::CorpusFormat(_) => "CorpusFormat",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
