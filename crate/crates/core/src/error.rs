use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Range(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid distribution parameters: {0}")]
    Distribution(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    #[error("data validation failed: {0}")]
    Validation(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(std::path::PathBuf),

    #[error("format version mismatch: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("fit with rank {rank} failed: {source}")]
    RankFit {
        rank: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::MissingFile(_)
            | Error::Version { .. }
            | Error::Integrity(_)
            | Error::Dimension(_)
            | Error::Json(_)
            | Error::Io(_) => 2,
            Error::LinearAlgebra(_) | Error::Numerical { .. } | Error::Distribution(_) => 3,
            Error::RankFit { source, .. } => source.exit_code(),
            Error::Argument(_) | Error::Config(_) | Error::Range(_) | Error::State(_) => 1,
        }
    }
}
