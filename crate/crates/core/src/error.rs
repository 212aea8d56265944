use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("hook contract violated at {site}: {detail}")]
    Contract { site: String, detail: String },

    #[error("ordering error: next timestep {next} is not {expected} current timestep {current}")]
    Ordering {
        current: usize,
        next: usize,
        expected: &'static str,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("teacher trace incomplete: no entry for step {step}, {site}")]
    TraceIncomplete { step: usize, site: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("csv error at line {line}: {detail}")]
    Csv { line: u64, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from bad input or configuration rather than
    /// a runtime or numeric fault. The CLI maps this onto its exit codes.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Argument(_)
                | Error::Config(_)
                | Error::Csv { .. }
                | Error::Format { .. }
                | Error::Image { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
