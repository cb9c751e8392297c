use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("diffusion time {t} outside [0, 1]")]
    Domain { t: f64 },

    #[error("variance is zero at t = {t}; the score is undefined")]
    DegenerateVariance { t: f64 },

    #[error("alpha({t}) = {alpha:.3e} is below the floor {floor:.1e}; reconstruction is ill-conditioned")]
    IllConditionedTime { t: f64, alpha: f64, floor: f64 },

    #[error("shape mismatch: {what} expected {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state diverged at reverse step {step} (t = {t:.4})")]
    Divergence { step: usize, t: f64 },

    #[error("no cached embedding for utterance `{0}`")]
    MissingEmbedding(String),

    #[error("embedding dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("embedding bank has no entry for arousal bin {0}")]
    MissingBin(u8),

    #[error("arousal {value} outside [1, 7]{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    ArousalRange { value: f64, context: Option<String> },

    #[error("manifest {path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short stable identifier used in structured CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::DegenerateVariance { .. } => "degenerate_variance",
            Error::IllConditionedTime { .. } => "ill_conditioned_time",
            Error::Shape { .. } => "shape",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::MissingBin(_) => "missing_bin",
            Error::ArousalRange { .. } => "arousal_range",
            Error::Manifest { .. } => "manifest",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Wav { .. } => "wav",
            Error::Json(_) => "json",
            Error::Plot(_) => "plot",
        }
    }
}
