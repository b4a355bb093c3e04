use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("sign mismatch in {op}: cannot combine DLR matrices of sign {left} and {right}")]
    SignMismatch {
        op: &'static str,
        left: i8,
        right: i8,
    },

    #[error("zero nugget entry at index {index} in {op}")]
    ZeroNugget { op: &'static str, index: usize },

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("singular matrix ({context})")]
    Singular { context: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid structural equation model: {0}")]
    InvalidModel(String),

    #[error("block {start}..{end} out of range for dimension {dim}")]
    BlockOutOfRange {
        start: usize,
        end: usize,
        dim: usize,
    },

    #[error("ensemble needs at least {needed} members, got {got}")]
    TooFewMembers { needed: usize, got: usize },

    #[error("message passing failed at factor {factor} (iteration {iteration}): {source}")]
    Divergence {
        factor: String,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("GEnBP outer iteration {outer} failed: {source}")]
    OuterIteration {
        outer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn not_pd(context: impl Into<String>) -> Self {
        Error::NotPositiveDefinite {
            context: context.into(),
        }
    }

    /// True when the failure traces back to a non-positive-definite or
    /// singular matrix somewhere down the chain.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::Singular { .. }
            | Error::NonFinite { .. } => true,
            Error::Divergence { source, .. } | Error::OuterIteration { source, .. } => {
                source.is_numerical()
            }
            _ => false,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
