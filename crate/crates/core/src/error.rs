use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("format error in {}{}: {reason}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        line: Option<usize>,
        reason: String,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: Option<usize>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Contract(_) => 1,
            Error::Format { .. } | Error::Io { .. } | Error::Generation(_) | Error::Dimension { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
