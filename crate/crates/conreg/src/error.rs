use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input that violates a type invariant (non-monotone warp,
    /// asymmetric density, mismatched domains, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Mathematically undefined operation (antipodal log, degenerate warp).
    #[error("domain error: {0}")]
    Domain(String),

    /// A warp stopped being a diffeomorphism (nonpositive Jacobian or
    /// non-monotone node values).
    #[error("diffeomorphism violation: {0}")]
    Diffeomorphism(String),

    /// Request exceeds a configured resource guard.
    #[error("resource limit: {0}")]
    Resource(String),

    /// An iterative routine failed to converge.
    #[error("convergence failure: {0}")]
    Convergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}
