use std::path::PathBuf;

use sfgs_core::Error as CoreError;
use sfgs_vae::VaeError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Data(String),

    /// Property absent from a PLY vertex element.
    #[error("PLY schema error: missing vertex property `{0}`")]
    MissingProperty(String),

    #[error("unsupported PLY encoding `{0}` (only binary_little_endian is read)")]
    UnsupportedEncoding(String),

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    /// Writing stopped after `written` complete records.
    #[error("write failed after {written} of {expected} records: {reason}")]
    PartialWrite { written: u64, expected: u64, reason: String },

    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub const EXIT_USAGE: i32 = 2;
    pub const EXIT_DATA: i32 = 3;
    pub const EXIT_NUMERIC: i32 = 4;

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => Self::EXIT_USAGE,
            CliError::Numeric(_) => Self::EXIT_NUMERIC,
            _ => Self::EXIT_DATA,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidParameter(_) | CoreError::UnsupportedDegree(_) => CliError::Usage(e.to_string()),
            CoreError::InvalidInput(_) | CoreError::Shape { .. } => CliError::Data(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<VaeError> for CliError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Core(inner) => inner.into(),
            VaeError::Config(_) => CliError::Usage(e.to_string()),
            VaeError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            VaeError::Shape { .. } | VaeError::Tensor { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("JSON: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("CSV: {e}"))
    }
}
