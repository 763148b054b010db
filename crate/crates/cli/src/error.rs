use std::fmt;

use lds_stitch::Error;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Usage = 2,
    Io = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: ExitCode::Usage, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: ExitCode::Io, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        self.code as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) | Error::Dimension(_) => ExitCode::Usage,
            Error::Io { .. } | Error::Format { .. } => ExitCode::Io,
            _ => ExitCode::Numerical,
        };
        Self { code, message: e.to_string() }
    }
}
