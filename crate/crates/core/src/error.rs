// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("rank deficient input: row {row} has residual norm {norm:e} after orthogonalization")]
    RankDeficient { row: usize, norm: f64 },

    #[error("edits disagree on hidden dimension: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("backward requires a scalar loss, got {len} elements")]
    NotScalar { len: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (offending parameter: {param})")]
    NonFiniteLoss { step: usize, param: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("hook error: {0}")]
    Hook(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("cannot match parameter budgets within tolerance: routed {routed}, shared {shared}")]
    Budget { routed: u64, shared: u64 },

    #[error("bad checkpoint magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {context}")]
    TruncatedFile { context: String },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
