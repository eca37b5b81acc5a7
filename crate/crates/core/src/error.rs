use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    #[error("{phase} diverged at iteration {iter}: loss {loss:.4e} exceeded 10x initial {initial:.4e} for {window} consecutive steps")]
    Diverged {
        phase: &'static str,
        iter: usize,
        loss: f64,
        initial: f64,
        window: usize,
    },

    #[error("adversarial phase collapsed at iteration {iter}: mean fake probability below {threshold:e} for {window} consecutive iterations")]
    Collapsed {
        iter: usize,
        threshold: f64,
        window: usize,
    },

    #[error("quadrature grid covers too little mass: {0}")]
    GridCoverage(String),

    #[error("checkpoint section `{section}`: {message}")]
    Checkpoint { section: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors raised by a training loop's abort detectors.
    pub fn is_training_abort(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::Collapsed { .. } | Error::NonFinite { .. }
        )
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
