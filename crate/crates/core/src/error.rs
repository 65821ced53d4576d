use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Diffusion matrix fails the uniform ellipticity requirement.
    #[error("ellipticity violation: {0}")]
    Ellipticity(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Failure inside a solver stage; the message carries the stage tag.
    #[error("solver error [{stage}]: {message}")]
    Solver { stage: &'static str, message: String },

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    /// Fixed-point iteration failed to contract.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn solver(stage: &'static str, msg: impl Into<String>) -> Self {
        Error::Solver { stage, message: msg.into() }
    }
}
