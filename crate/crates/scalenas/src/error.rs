use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors raised by the IO layer and the command line.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Malformed file content. `line` is 1-based and counts the header.
    #[error("{}{}: {message}", path.display(), line.map(|l| format!(":{l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Dimension(String),

    #[error("{}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] scalenas_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    /// Short machine-readable category, printed as `error[kind]`.
    pub fn kind(&self) -> &'static str {
        use scalenas_core::Error as E;
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::Config(_) => "config",
            CliError::Dimension(_) => "dimension",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Usage(_) => "usage",
            CliError::Core(e) => match e {
                E::ShapeMismatch { .. } | E::InvalidAxis { .. } | E::DataLength { .. } => "shape",
                E::TimestampGap { .. } | E::DuplicateTimestamp { .. } | E::NonFiniteValue { .. } | E::Data(_) => {
                    "data"
                }
                E::Config(_) => "config",
                E::NonFiniteLoss { .. } => "numeric",
                E::Stage { .. } | E::NonScalarLoss(_) | E::MissingGradient(_) => "internal",
            },
        }
    }

    /// Process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: Option<usize>, message: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}
