use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("template set is empty")]
    EmptyTemplateSet,

    #[error("template requires a value for `{0}`")]
    MissingField(&'static str),

    #[error("unknown label `{label}` for {dataset}; valid labels: {}", valid.join(", "))]
    UnknownLabel {
        dataset: String,
        label: String,
        valid: Vec<String>,
    },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),

    #[error("adapter `{id}` is registered but has no reader; expected layout: {layout}")]
    AdapterNotImplemented { id: String, layout: String },

    #[error("{}:{line} (byte {offset}): {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        offset: u64,
        message: String,
    },

    #[error("invalid record {id}: {}", violations.join("; "))]
    InvalidRecord { id: String, violations: Vec<String> },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no non-pad targets")]
    NoTargets,

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("document has no pages")]
    EmptyDocument,

    #[error("encoder input has {len} rows, limit is {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("parameter `{0}` has no recognised partition prefix")]
    Partition(String),

    #[error("missing predictions for {} instance(s): {}", .0.len(), .0.join(", "))]
    MissingPrediction(Vec<String>),

    #[error("gold answer list is empty")]
    EmptyGolds,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("instance {id}: {source}")]
    Instance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NanGradient(_) | Error::NonScalarLoss(_) | Error::NoTargets => {
                ErrorClass::Numeric
            }
            Error::Config(_) | Error::UnknownAdapter(_) => ErrorClass::Usage,
            Error::Instance { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
