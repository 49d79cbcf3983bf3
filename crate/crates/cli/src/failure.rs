//! Error classification into process exit codes.

use loki_core::LokiError;
use std::fmt;
use std::io::ErrorKind;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Bad flags or flag combinations the parser cannot catch.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Inputs that parse but do not fit together.
#[derive(Debug)]
pub struct Data(pub String);

impl fmt::Display for Data {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Data {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn data(msg: impl Into<String>) -> anyhow::Error {
    Data(msg.into()).into()
}

fn loki_code(e: &LokiError) -> i32 {
    match e {
        LokiError::Budget(_) | LokiError::Domain(_) => EXIT_USAGE,
        LokiError::Format(_)
        | LokiError::Integrity(_)
        | LokiError::DegenerateCalibration(_)
        | LokiError::InsufficientData(_)
        | LokiError::Shape(_)
        | LokiError::Index { .. } => EXIT_DATA,
        LokiError::AtHead { source, .. } => loki_code(source),
        LokiError::Io(io) => io_code(io),
    }
}

fn io_code(e: &std::io::Error) -> i32 {
    match e.kind() {
        ErrorKind::NotFound | ErrorKind::PermissionDenied | ErrorKind::IsADirectory => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// First classifiable error in the chain wins; anything else is internal.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return EXIT_USAGE;
        }
        if cause.is::<Data>() {
            return EXIT_DATA;
        }
        if let Some(e) = cause.downcast_ref::<LokiError>() {
            return loki_code(e);
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            return io_code(e);
        }
    }
    EXIT_INTERNAL
}
