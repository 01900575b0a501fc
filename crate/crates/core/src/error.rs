use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid value: {0}")]
    Domain(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    /// Dual variables left the open domain of a conjugate.
    #[error("dual variables of site {site} are outside the feasible domain")]
    Infeasible { site: usize },

    #[error("exponent {0:e} exceeds the overflow cap of 700")]
    Overflow(f64),

    #[error("model has {latent} latent dimensions; the Cholesky-factor baseline accepts at most {limit}")]
    TooLarge { latent: usize, limit: usize },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
