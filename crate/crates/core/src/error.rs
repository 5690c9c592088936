use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate embedding: row {row} has near-zero norm")]
    DegenerateEmbedding { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss node must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary { token: usize, vocab: usize },

    #[error("token sequence {index} is empty")]
    EmptySequence { index: usize },

    #[error("lora rank {rank} exceeds min({rows}, {cols}) for layer {layer}")]
    LoraRank {
        rank: usize,
        layer: usize,
        rows: usize,
        cols: usize,
    },

    #[error("encoder has no lora adapters attached")]
    NoAdapters,

    #[error("missing loss weight for modality '{0}'")]
    MissingWeight(String),

    #[error("unknown modality '{0}'")]
    UnknownModality(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical divergence in {phase} at step {step}: {detail}")]
    Divergence {
        phase: &'static str,
        step: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
