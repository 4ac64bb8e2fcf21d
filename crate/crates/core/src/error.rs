use thiserror::Error;

/// Errors produced by model assembly, filtering, likelihood evaluation and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("stability violated: {0}")]
    Stability(String),

    #[error("observation noise matrix J_eo does not have full row rank (A2 violated)")]
    RankDeficientObservation,

    #[error("riccati recursion did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("ill-conditioned computation: {0}")]
    Conditioning(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("objective is not finite at the starting point")]
    InvalidStart,

    #[error("finite-difference stencil left the admissible set at coordinate {0}")]
    Stencil(usize),

    #[error("estimation failed in stage {stage}: {message}")]
    Estimation { stage: String, message: String },

    #[error("model generation failed: {0}")]
    Generation(String),

    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
