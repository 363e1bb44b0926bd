use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use partfield::Error;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration.
    Usage(String),
    /// Missing, unreadable or malformed inputs and failed writes.
    Data(String),
    /// Training produced a non-finite value.
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }

    /// Library error with the path it concerns.
    pub fn at(path: &Path, e: Error) -> Self {
        match CliError::from(e) {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            Error::NonFinite { step, message, snapshot } => CliError::Numerical(format!(
                "non-finite value at step {step}: {message} ({} parameters, {} non-finite)",
                snapshot.len(),
                snapshot.iter().filter(|x| !x.is_finite()).count()
            )),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
