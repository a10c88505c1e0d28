//! Command errors and their exit codes.

use std::fmt;

use dwdr::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration (exit 1).
    Usage,
    /// Non-finite values or failed numeric checks (exit 2).
    Numeric,
    /// Reading or writing files (exit 3).
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Numeric, message: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Io, message: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Numeric => 2,
            ErrorKind::Io => 3,
        }
    }

    /// Prefixes the message with `context`.
    pub fn context(self, context: impl fmt::Display) -> Self {
        Self { message: format!("{context}: {}", self.message), ..self }
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
        let kind = match &e {
            Error::Numeric(_) | Error::DegenerateBatch(_) => ErrorKind::Numeric,
            Error::Io(_) | Error::Parse { .. } | Error::Data(_) => ErrorKind::Io,
            Error::Dimension(_) | Error::Config(_) | Error::Contract(_) => ErrorKind::Usage,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}
