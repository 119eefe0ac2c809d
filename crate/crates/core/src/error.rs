use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid order: {0}")]
    InvalidOrder(String),

    #[error("invalid scale configuration: {0}")]
    InvalidScale(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("innovation covariance is singular at state time {time}")]
    Singular { time: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("model selection failed: {0}")]
    Selection(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures that come from the numerics rather than from the
    /// caller's input or configuration.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_numeric(),
            e => matches!(e, Error::Singular { .. } | Error::Numeric(_) | Error::Selection(_)),
        }
    }

    /// Tag the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
