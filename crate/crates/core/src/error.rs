use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {msg}")]
    TrainingDiverged { step: usize, msg: String },

    #[error("sampler diverged at step {step}: {msg}")]
    SamplerDiverged { step: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing {path}; run the `{stage}` stage first")]
    MissingStage { stage: String, path: PathBuf },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config or domain violations)
    /// rather than failures during a run.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Domain(_))
    }
}
