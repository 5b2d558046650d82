//! Error type shared across the core modules.

use alloc::string::String;
use core::fmt;

/// Errors produced by the core engine.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes do not conform for an operation. Carries the op name
    /// and, when raised from the tape, the node index it was recorded at.
    Shape { op: &'static str, detail: String },
    /// A caller violated an operation's precondition.
    Contract(String),
    /// Invalid configuration or parameter value.
    Config(String),
    /// Input data failed an integrity check (bad slot counts, unknown ids).
    Data(String),
    /// A numeric failure (NaN/Inf) was detected; message names the culprit.
    Numeric(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            CoreError::Contract(msg) => write!(f, "contract violation: {msg}"),
            CoreError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::Data(msg) => write!(f, "data integrity error: {msg}"),
            CoreError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
