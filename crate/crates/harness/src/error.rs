use std::path::PathBuf;

use serde_json::json;

/// Errors surfaced by the harness.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Core(#[from] pfljscc_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code: 2 for invalid configuration, 3 for numeric
    /// failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use pfljscc_core::Error as E;
        match self {
            Self::Config { .. } | Self::Usage(_) => 2,
            Self::Core(E::InvalidConfig { .. }) => 2,
            Self::Core(
                E::Numeric { .. } | E::VacuousBound { .. } | E::Estimation(_) | E::DegenerateSignal,
            ) => 3,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "numeric",
            _ => match self {
                Self::Io { .. } => "io",
                Self::Checkpoint { .. } => "checkpoint",
                _ => "runtime",
            },
        }
    }

    /// Single-line machine-readable description.
    pub fn to_json_line(&self) -> String {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            Self::Config { field, .. }
            | Self::Core(pfljscc_core::Error::InvalidConfig { field, .. }) => {
                v["field"] = json!(field);
            }
            _ => {}
        }
        v.to_string()
    }
}
