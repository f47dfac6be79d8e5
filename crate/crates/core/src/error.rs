use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("simulation diverged at step {step}: {detail}")]
    SimulationDiverged { step: u64, detail: String },

    #[error("invalid reset: {0}")]
    InvalidReset(String),

    #[error("parameter {value} outside range [{lo}, {hi}]")]
    OutOfRangeParam { value: f64, lo: f64, hi: f64 },

    #[error("step called on a finished episode")]
    EpisodeFinished,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeError { expected: String, got: String },

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("invalid rollout buffer: {0}")]
    InvalidBuffer(String),

    #[error("prior query set has no records")]
    EmptyPrior,

    #[error("ensemble needs at least 2 members, got {0}")]
    EnsembleTooSmall(usize),

    #[error("variance must be positive and finite, got {0}")]
    InvalidVariance(f64),

    #[error("data error: {0}")]
    DataError(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeError {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::Json(_)
            | Error::MissingArtifact(_)
            | Error::OutOfRangeParam { .. }
            | Error::EmptyPrior
            | Error::EnsembleTooSmall(_)
            | Error::InvalidVariance(_) => 2,
            Error::SimulationDiverged { .. } | Error::NumericalError(_) => 3,
            _ => 1,
        }
    }
}
