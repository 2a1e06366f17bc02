use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] evsplat_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format { path: path.into(), message: message.to_string() }
    }

    /// Stable tag for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        use evsplat_core::Error as E;
        match self {
            Self::Io { .. } => "io",
            Self::Config(_) | Self::Core(E::Config(_)) => "config",
            Self::Format { .. } => "format",
            Self::Core(E::Divergence { .. }) => "divergence",
            Self::Core(E::Checkpoint(_)) => "checkpoint",
            Self::Core(_) => "core",
        }
    }

    /// One-line JSON object describing the failure.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
