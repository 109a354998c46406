//! Exit-code taxonomy: 2 I/O, 3 configuration, 4 solver.

use std::fmt;
use std::process::ExitCode;

use specinv::Error;

pub const EXIT_IO: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_SOLVER: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    /// Prefixes the message with what was being done.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub fn code_for(e: &Error) -> u8 {
    match e {
        Error::Io(_)
        | Error::Wav(_)
        | Error::Json(_)
        | Error::NotMono(_)
        | Error::UnsupportedFormat(_)
        | Error::Dataset(_)
        | Error::EmptyWaveform
        | Error::NonFinite(_)
        | Error::Weights(_) => EXIT_IO,
        Error::FrameSolve { .. } | Error::ZeroPivot { .. } | Error::Singular(_) | Error::NonFiniteActivation(_) => {
            EXIT_SOLVER
        }
        _ => EXIT_CONFIG,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: code_for(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e.to_string())
    }
}
