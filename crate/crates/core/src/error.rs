use std::path::PathBuf;

use thiserror::Error;

use crate::archspec::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid architecture: {}", format_violations(.0))]
    InvalidArch(Vec<Violation>),

    #[error("invalid block at {layer}: {reason}")]
    InvalidBlock { layer: String, reason: String },

    #[error("resolution {resolution} is not divisible by the downsampling factor {factor}")]
    IndivisibleResolution { resolution: u32, factor: u32 },

    #[error("shape mismatch at {layer}: {reason}")]
    ShapeMismatch { layer: String, reason: String },

    #[error("invalid shrink configuration: {0}")]
    InvalidShrink(String),

    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("invalid subnet choice: {0}")]
    InvalidChoice(String),

    #[error("constraint infeasible: smallest sub-network needs {min_macs} MACs, limit is {limit}")]
    InfeasibleConstraint { min_macs: u64, limit: u64 },

    #[error("no constraint-satisfying candidate after {0} retries")]
    RetryCapExhausted(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_invalid_input(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::RetryCapExhausted(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
