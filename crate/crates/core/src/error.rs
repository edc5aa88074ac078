use thiserror::Error;

/// Errors raised by the distribution kernels, the fitters and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("design matrix is rank deficient; offending columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("response column {column} has zero variance")]
    ZeroVariance { column: usize },

    #[error("no positive root for the scale equation of response {response}")]
    NoPositiveRoot { response: usize },

    #[error("log-likelihood diverged at iteration {iteration} (last finite value {last_loglik})")]
    Diverged {
        iteration: usize,
        last_loglik: f64,
        last_state: Box<crate::mal_dist::ModelParams>,
    },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by malformed user input rather than numerics.
    pub fn is_input(&self) -> bool {
        matches!(self, Error::Input(_) | Error::Io(_) | Error::Dimension(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
