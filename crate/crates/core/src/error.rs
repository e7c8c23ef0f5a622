use std::io;

use thiserror::Error;

/// Errors produced by the engine. Every variant carries the name of the module
/// that raised it so CLI messages can be traced back to their source.
#[derive(Debug, Error)]
pub enum DpiError {
    #[error("{module}: invalid parameter: {msg}")]
    Param { module: &'static str, msg: String },

    #[error("{module}: shape mismatch: {msg}")]
    Shape { module: &'static str, msg: String },

    #[error("{module}: bad data: {msg}")]
    Data { module: &'static str, msg: String },

    #[error("{module}: numerical failure: {msg}")]
    Numerical { module: &'static str, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DpiError>;

impl DpiError {
    pub fn param(module: &'static str, msg: impl Into<String>) -> Self {
        DpiError::Param { module, msg: msg.into() }
    }

    pub fn shape(module: &'static str, msg: impl Into<String>) -> Self {
        DpiError::Shape { module, msg: msg.into() }
    }

    pub fn data(module: &'static str, msg: impl Into<String>) -> Self {
        DpiError::Data { module, msg: msg.into() }
    }

    pub fn numerical(module: &'static str, msg: impl Into<String>) -> Self {
        DpiError::Numerical { module, msg: msg.into() }
    }

    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        DpiError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            DpiError::Param { .. } | DpiError::Shape { .. } => 1,
            DpiError::Data { .. } | DpiError::Io { .. } => 2,
            DpiError::Numerical { .. } => 3,
        }
    }
}
