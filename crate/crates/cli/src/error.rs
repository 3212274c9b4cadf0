use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed input file; `line` is 1-based and counts the header.
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] coloc_core::Error),
}

impl CliError {
    /// Stable tag for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Format { .. } => "format",
            CliError::Config(_) => "config",
            CliError::Core(coloc_core::Error::Fit { .. }) => "fit",
            CliError::Core(_) => "core",
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// One JSON object on one line: `{"error":{"kind":..,"message":..}}`.
    pub fn json_line(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}
