use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum MartError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("relationship error: {0}")]
    Relationship(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MartError {
    pub fn dim(msg: impl Into<String>) -> Self {
        MartError::Dimension(msg.into())
    }

    pub fn parse(offset: u64, msg: impl Into<String>) -> Self {
        MartError::Parse {
            offset,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MartError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MartError::Config(_) => 1,
            MartError::Numeric(_)
            | MartError::Domain(_)
            | MartError::DegenerateVector(_)
            | MartError::UndefinedMetric(_) => 3,
            MartError::Dimension(_)
            | MartError::TooShort(_)
            | MartError::Parse { .. }
            | MartError::Relationship(_)
            | MartError::Io { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, MartError>;
