use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid config key `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing column `{0}` in telemetry")]
    MissingColumn(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("output path {0} already exists (pass --overwrite to replace it)")]
    OutputExists(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::InvalidConfig { .. } => "invalid_config",
            LabError::InvalidArgument(_) => "invalid_argument",
            LabError::ShapeMismatch(_) => "shape_mismatch",
            LabError::Precondition(_) => "precondition",
            LabError::MissingColumn(_) => "missing_column",
            LabError::Snapshot(_) => "snapshot",
            LabError::OutputExists(_) => "output_exists",
            LabError::Io { .. } => "io",
            LabError::Json(_) => "json",
        }
    }
}
