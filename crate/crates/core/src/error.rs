use std::path::PathBuf;

/// Crate-wide error type. Every variant maps to a stable, greppable code
/// through [`Error::code`] so the CLI can emit one-line diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in field `{field}` at byte {offset}: {message}")]
    Format {
        field: String,
        offset: u64,
        message: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Contract(_) => "E_CONTRACT",
            Error::Config(_) => "E_CONFIG",
            Error::Format { .. } => "E_FORMAT",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Io { .. } => "E_IO",
            Error::Csv(_) => "E_CSV",
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
