use std::path::PathBuf;

use thiserror::Error;

/// Classes of malformed table content reported by the loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TableErrorKind {
    /// The line is not a valid record (bad JSON, missing or mistyped field).
    Parse,
    /// `tokens` and `logp` have different lengths, or the record is empty.
    LengthMismatch,
    /// A log-probability exceeds the accepted rounding slack above zero.
    PositiveLogProb,
    /// A log-probability is not a finite number.
    NonFinite,
    /// The same `(image, text)` key appears twice.
    DuplicateKey,
    /// The reserved `null` id is used as a text id, or an id is empty.
    ReservedId,
    /// Two records for one text id disagree on its tokens.
    TokenMismatch,
    /// Embedding dimensionality differs within a modality, or a vector is degenerate.
    Embedding,
}

impl TableErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parse => "parse",
            Self::LengthMismatch => "length-mismatch",
            Self::PositiveLogProb => "positive-logp",
            Self::NonFinite => "non-finite",
            Self::DuplicateKey => "duplicate-key",
            Self::ReservedId => "reserved-id",
            Self::TokenMismatch => "token-mismatch",
            Self::Embedding => "embedding",
        }
    }
}

impl std::fmt::Display for TableErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty token sequence")]
    EmptySequence,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("missing entry: {0}")]
    MissingEntry(String),

    #[error("empty sample list")]
    EmptySample,

    #[error("invalid weights: {0}")]
    Weight(String),

    #[error("model domain error: {0}")]
    ModelDomain(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}:{line}: {kind}: {detail}")]
    Table {
        path: String,
        line: usize,
        kind: TableErrorKind,
        detail: String,
    },

    #[error("{path}:{line}: {detail}")]
    Manifest {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("adapter protocol error: {detail} (raw: {raw})")]
    AdapterProtocol { detail: String, raw: String },

    #[error("adapter timeout: {0}")]
    AdapterTimeout(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Self::Dimension { .. } => "DimensionError",
            Self::DegenerateVector(_) => "DegenerateVectorError",
            Self::InvalidInput(_) => "InvalidInputError",
            Self::EmptySequence => "EmptySequenceError",
            Self::Alignment(_) => "AlignmentError",
            Self::MissingEntry(_) => "MissingEntryError",
            Self::EmptySample => "EmptySampleError",
            Self::Weight(_) => "WeightError",
            Self::ModelDomain(_) => "ModelDomainError",
            Self::Construction(_) => "ConstructionError",
            Self::EmptyDataset(_) => "EmptyDatasetError",
            Self::Table { .. } => "TableError",
            Self::Manifest { .. } => "ManifestError",
            Self::AdapterProtocol { .. } => "AdapterProtocolError",
            Self::AdapterTimeout(_) => "AdapterTimeoutError",
            Self::Io { .. } => "IoError",
        }
    }

    pub fn is_adapter(&self) -> bool {
        matches!(self, Self::AdapterProtocol { .. } | Self::AdapterTimeout(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
