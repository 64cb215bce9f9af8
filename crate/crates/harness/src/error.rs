use std::path::PathBuf;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed row {row}: expected {expected} columns, got {got}")]
    MalformedRow {
        path: PathBuf,
        /// 1-based data row, header excluded.
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("{path}: row {row}: label `{value}` is not a non-negative integer")]
    BadLabel {
        path: PathBuf,
        row: usize,
        value: String,
    },
    #[error("{path}: row {row}, column {column}: `{value}` is not a number")]
    BadFeature {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },
    #[error("{path}: bad header: {reason}")]
    BadHeader { path: PathBuf, reason: String },
    #[error("{0}: no data rows")]
    NoDataRows(PathBuf),
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing artifact {0}; run the producing step first")]
    MissingArtifact(PathBuf),
    #[error("cannot compare: {0}")]
    Compare(String),
    #[error(transparent)]
    Core(#[from] selfcal_core::Error),
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(
                selfcal_core::Error::Divergence { .. } | selfcal_core::Error::NonFinite { .. },
            ) => 3,
            _ => 1,
        }
    }
}
