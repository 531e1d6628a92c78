use std::fmt;

use ionstain::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    /// The single stderr line: `error<TAB>code=N<TAB>kind=K<TAB>message`.
    pub fn line(&self) -> String {
        let msg = self.message.replace(['\n', '\t'], " ");
        format!("error\tcode={}\tkind={}\t{msg}", self.code, self.kind)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } => (EXIT_IO, "io"),
            Error::Parse { .. } => (EXIT_IO, "parse"),
            Error::Json { .. } => (EXIT_USAGE, "config"),
            Error::InvalidArgument(_) | Error::InvalidState(_) => (EXIT_USAGE, "invalid"),
            Error::Numerical(_) => (EXIT_NUMERIC, "numeric"),
            Error::TrainingDiverged { .. } => (EXIT_NUMERIC, "diverged"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
