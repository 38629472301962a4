use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("joint {joint} has non-positive depth {depth}")]
    NonPositiveDepth { joint: usize, depth: f64 },

    #[error("no consensus: best inlier set has {inliers} view(s)")]
    NoConsensus { inliers: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("training diverged at step {step}: total loss is {value}")]
    Divergence { step: usize, value: f64 },

    #[error("view {view}: {source}")]
    View {
        view: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics (divergence, degeneracy) rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Divergence { .. }
            | Error::Degenerate(_)
            | Error::NoConsensus { .. }
            | Error::NonPositiveDepth { .. } => true,
            Error::View { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
