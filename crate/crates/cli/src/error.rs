use std::fmt;

use mmnl_core::Error;

/// Failure categories, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Divergence(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Io(_) => 5,
            CliError::Numerical(_) => 6,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Reclassifies argument and format errors raised while reading input
    /// files as data errors. IO failures keep their own code.
    pub fn from_data(path: &std::path::Path, e: Error) -> Self {
        match e {
            Error::Io(io) => CliError::io(path.display(), io),
            other => CliError::Data(format!("{}: {other}", path.display())),
        }
    }

    pub fn io(context: impl fmt::Display, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{context}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, msg) = match self {
            CliError::Config(m) => ("configuration error", m),
            CliError::Data(m) => ("data error", m),
            CliError::Divergence(m) => ("divergence", m),
            CliError::Io(m) => ("io error", m),
            CliError::Numerical(m) => ("numerical error", m),
        };
        write!(f, "{kind}: {msg}")
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) => CliError::Config(msg),
            Error::Divergence { .. } => CliError::Divergence(msg),
            Error::Numerical { .. } | Error::NonConvergence { .. } => CliError::Numerical(msg),
            Error::Schema(_) | Error::Parse { .. } | Error::Version { .. } | Error::Json(_) | Error::Csv(_) => {
                CliError::Data(msg)
            }
            Error::Io(_) => CliError::Io(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
