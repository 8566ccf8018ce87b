//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a rank-0 loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("zero-norm embedding at row {0}; cosine similarity is undefined")]
    ZeroVector(usize),

    // Checkpoint format errors. Each failure mode is reported distinctly.
    #[error("checkpoint has corrupt magic bytes (not an SSMBCKPT file)")]
    CorruptMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unsupported checkpoint version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("checkpoint tensor {name} has unusable shape: {detail}")]
    TensorShape { name: String, detail: String },

    #[error("dataset needs at least {min} identities, got {got}")]
    TooFewIdentities { min: usize, got: usize },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("unknown modality `{0}`")]
    UnknownModality(String),
    #[error("manifest parse error at line {line}: {detail}")]
    ManifestParse { line: usize, detail: String },
    #[error("cannot sample impostor pairs: need at least 2 identities with usable samples")]
    InsufficientIdentities,
    #[error("manifest has no `{0}` records")]
    MissingSplit(&'static str),

    #[error("score set has no {0} scores")]
    EmptyScores(&'static str),
    #[error("probe identity {0} is missing from the gallery")]
    MissingIdentity(u32),

    #[error("image decode error: {0}")]
    ImageFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }
}
