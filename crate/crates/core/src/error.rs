use thiserror::Error;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("point {value} outside domain [{lo}, {hi}]")]
    Domain { value: f64, lo: f64, hi: f64 },

    #[error("invalid derivative order {order} for spline order {degree}")]
    InvalidOrder { order: usize, degree: usize },

    #[error("numerical conditioning: {0}")]
    Conditioning(String),

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag, used by the CLI for machine-parseable failures.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidSpec(_) => "invalid-spec",
            Error::Domain { .. } => "domain",
            Error::InvalidOrder { .. } => "invalid-order",
            Error::Conditioning(_) => "conditioning",
            Error::InvalidSystem(_) => "invalid-system",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Numerical(_) => "numerical",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
