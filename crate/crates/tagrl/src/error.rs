//! Crate error type and process exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("topology not connected")]
    NotConnected,

    #[error("self-loop edge ({0}, {0}) is not allowed")]
    SelfLoop(usize),

    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),

    #[error("node index {index} out of range for {n} nodes")]
    NodeOutOfRange { index: usize, n: usize },

    #[error("invalid link attribute: {0}")]
    InvalidLinkAttr(String),

    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("topology generation failed after {0} attempts")]
    GenerationFailed(usize),

    #[error("infeasible action {action} at node {node}")]
    InfeasibleAction { node: usize, action: usize },

    #[error("non-finite value in {0}; aborting")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Exit code for the CLI: 2 for validation problems, 3 for numeric
    /// failures (NaN/Inf aborts).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
