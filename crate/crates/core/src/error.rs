use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a mathematical domain restriction.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("overflow: {0}")]
    Overflow(String),

    /// Implicit step failed to converge at (step, path).
    #[error("Newton iteration did not converge at step {step}, path {path}")]
    NewtonNonConvergence { step: usize, path: usize },

    #[error("regression rank deficiency at step {step}: {detail}")]
    RankDeficient { step: usize, detail: String },

    /// Every simulated wealth path hit the positivity floor.
    #[error("all wealth paths hit the positivity floor")]
    AllPathsFloored,

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
