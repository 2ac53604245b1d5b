use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to an op's broadcasting or contraction rule.
    #[error("shape error: {0}")]
    Shape(String),
    /// A NaN or infinity was produced or supplied.
    #[error("numerics error: {0}")]
    Numerics(String),
    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// The finite-difference oracle could not produce a trustworthy answer.
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("prototype memory has no initialized prototypes")]
    EmptyMemory,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for contract violations, 3 for numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_)
            | Error::Shape(_)
            | Error::EmptyMemory
            | Error::Format(_)
            | Error::Json(_) => 2,
            Error::Numerics(_) => 3,
            Error::Oracle(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
