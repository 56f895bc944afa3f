use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("unsupported graph: {0}")]
    UnsupportedGraph(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("infeasible syndrome: {0}")]
    Infeasible(String),
    #[error("compilation integrity error: {0}")]
    Integrity(String),
    #[error("fusion integrity error: {0}")]
    FusionIntegrity(String),
    #[error("premature finalize: {0}")]
    PrematureFinalize(String),
    #[error("unsupported operation: {0}")]
    UnsupportedOperation(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("state error: {0}")]
    State(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse { line, message: message.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
