use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NumericInput(String),

    #[error("spectrum is not Hermitian: max deviation {deviation:.3e} exceeds {tolerance:.1e}")]
    AsymmetricSpectrum { deviation: f64, tolerance: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unstable configuration: {0}")]
    Stability(String),

    #[error("solver diverged at substep {substep}: {what}")]
    Divergence { substep: usize, what: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("truncated file {path}: expected {expected} bytes at offset {offset}, found {found}")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
        found: u64,
    },

    #[error("checksum mismatch for {path}: manifest {expected:016x}, file {actual:016x}")]
    Checksum {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDivergence { epoch: usize, loss: f64 },

    #[error("trajectory {trajectory} (seed {seed}) at step {step}: {source}")]
    Trajectory {
        trajectory: usize,
        seed: u64,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, skipping stage and trajectory wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Trajectory { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(
            self.root(),
            Error::Divergence { .. } | Error::TrainingDivergence { .. }
        )
    }
}
