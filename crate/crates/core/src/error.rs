use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on the arguments was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The data admits no unique answer (parallel planes, zero rays, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// NaN/inf appeared during an iterative computation.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Error raised inside a pipeline stage, tagged with the module name.
    #[error("[{module}] {source}")]
    Module {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn in_module(self, module: &'static str) -> Self {
        match self {
            e @ Error::Module { .. } => e,
            e => Error::Module {
                module,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with module tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Module { source, .. } => source.root(),
            e => e,
        }
    }
}
