use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Pipeline,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("encoder contract violated by `{adapter}`: {message}")]
    Contract { adapter: String, message: String },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("stratification failed: charge `{charge}` has {cases} cases, fewer than {folds} folds")]
    Stratification {
        charge: String,
        cases: usize,
        folds: usize,
    },

    #[error("perturbation error: {0}")]
    Perturbation(String),

    #[error("case `{0}` is emptied by element removal")]
    EmptiedCase(String),

    #[error("ablation error: {0}")]
    Ablation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Spec(_) => ErrorClass::Config,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) => ErrorClass::Data,
            _ => ErrorClass::Pipeline,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
