use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum VoltaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl VoltaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        VoltaError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        VoltaError::ShapeMismatch(msg.into())
    }

    pub(crate) fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        VoltaError::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        VoltaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Wraps the error with the stage it surfaced in, keeping its kind.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            VoltaError::InvalidArgument(m) => VoltaError::InvalidArgument(format!("{ctx}: {m}")),
            VoltaError::ShapeMismatch(m) => VoltaError::ShapeMismatch(format!("{ctx}: {m}")),
            VoltaError::Degenerate(m) => VoltaError::Degenerate(format!("{ctx}: {m}")),
            VoltaError::Numeric { stage, detail } => VoltaError::Numeric {
                stage: format!("{ctx}/{stage}"),
                detail,
            },
            VoltaError::Config(m) => VoltaError::Config(format!("{ctx}: {m}")),
            VoltaError::Parse(m) => VoltaError::Parse(format!("{ctx}: {m}")),
            VoltaError::Io { path, source } => VoltaError::Io {
                path: format!("{ctx}: {path}"),
                source,
            },
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            VoltaError::Config(_) | VoltaError::Parse(_) => 2,
            VoltaError::Numeric { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, VoltaError>;
