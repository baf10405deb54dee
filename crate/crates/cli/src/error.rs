use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] splineop_core::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("output directory {0} already exists and is not empty")]
    OutputExists(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    /// Stable tag printed as `error[tag]: …`.
    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.tag(),
            CliError::Io { .. } => "io",
            CliError::Config { .. } => "config",
            CliError::OutputExists(_) => "output-exists",
            CliError::Dataset(_) => "dataset",
            CliError::Mismatch(_) => "mismatch",
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
