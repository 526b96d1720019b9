use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or lengths that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An index (class id, token id, position) outside its valid range.
    #[error("index error: {0}")]
    Index(String),

    /// A numeric hyper-parameter outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity appeared in a tensor.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid configuration (unknown preset, unknown parameter group, empty split, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A question that does not fit into the sequence budget.
    #[error("truncation error: {0}")]
    Truncation(String),

    /// Malformed input file.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    /// A dataset record violating its schema invariants.
    #[error("record {id}: {message}")]
    Record { id: String, message: String },

    #[error("dataset {0} contains no valid records")]
    EmptyDataset(PathBuf),

    #[error("bad tensor container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
