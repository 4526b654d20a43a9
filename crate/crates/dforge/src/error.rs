//! Failure classes for the command line tool and their exit codes.

use std::fmt;
use std::path::Path;

use dforge_core::checkpoint::CheckpointError;
use dforge_core::corruptor::CorruptError;
use dforge_core::eval::EvalError;
use dforge_core::model::ModelError;
use dforge_core::numerics::NumericsError;
use dforge_core::textproc::TextError;
use dforge_core::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad flags, config keys or values.
    Usage,
    /// Unreadable, missing or malformed inputs and inconsistent artifacts.
    Data,
    /// Non-finite values during training or inference.
    Numerics,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numerics => 3,
        }
    }
}

#[derive(Debug)]
pub struct Error {
    pub kind: ErrorKind,
    pub message: String,
}

impl Error {
    pub fn usage(message: impl Into<String>) -> Self {
        Error { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Error { kind: ErrorKind::Data, message: message.into() }
    }

    pub fn numerics(message: impl Into<String>) -> Self {
        Error { kind: ErrorKind::Numerics, message: message.into() }
    }

    /// An I/O failure on `path`; the path always appears in the message.
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Error::data(format!("{}: {err}", path.display()))
    }

    /// Prefixes the message with where the failure happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;

impl From<TextError> for Error {
    fn from(e: TextError) -> Self {
        Error::data(e.to_string())
    }
}

impl From<CorruptError> for Error {
    fn from(e: CorruptError) -> Self {
        Error::data(e.to_string())
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::data(e.to_string())
    }
}

impl From<EvalError> for Error {
    fn from(e: EvalError) -> Self {
        Error::data(e.to_string())
    }
}

impl From<NumericsError> for Error {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::MaskedEverything | NumericsError::IndexOutOfRange { .. } => Error::data(e.to_string()),
            NumericsError::Shape(_) | NumericsError::NonFinite(_) => Error::numerics(e.to_string()),
        }
    }
}

impl From<ModelError> for Error {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) => n.into(),
            ModelError::Config(_) => Error::usage(e.to_string()),
            other => Error::data(other.to_string()),
        }
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Hyper(_) => Error::usage(e.to_string()),
            TrainError::NonFiniteGradient { .. } | TrainError::Diverged { .. } => Error::numerics(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => Error::data(other.to_string()),
        }
    }
}
