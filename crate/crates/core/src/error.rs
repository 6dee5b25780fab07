use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (dimensions, rates, unknown kinds).
    #[error("configuration error: {0}")]
    Config(String),

    /// Arguments violate an operation's shape or precondition contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: line {line}: {kind}")]
    Validation {
        path: PathBuf,
        line: usize,
        kind: ValidationKind,
    },

    #[error("unknown label {label:?}; known labels: {known:?}")]
    Vocabulary { label: String, known: Vec<String> },

    #[error("no entry with id {0:?}")]
    NotFound(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("malformed {format} file: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("training diverged at step {step} (last good checkpoint: {last_good:?})")]
    Divergence {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// What went wrong with a single dataset record.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationKind {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("joint count mismatch in `{field}`: topology {topology} expects {expected} joints, found {found}")]
    JointCount {
        field: String,
        topology: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite coordinate in `{field}` at index {index}")]
    NonFinite { field: String, index: usize },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("horizon mismatch: expected {expected} future frames, found {found}")]
    Horizon { expected: usize, found: usize },
    #[error("unsupported format {0:?}")]
    UnknownFormat(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
