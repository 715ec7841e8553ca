use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    /// A selected block starts after the query row that selected it.
    #[error("block {block} starts after query position {position}")]
    NonCausalBlock { block: usize, position: usize },

    #[error("query position {position} has no visible keys and no sink")]
    EmptyRow { position: usize },

    #[error("layer {writer} does not own {target}")]
    NotOwner { writer: usize, target: String },

    #[error("block {block} out of range (store holds {blocks} blocks)")]
    BlockOutOfRange { block: usize, blocks: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("weights file: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid { op, detail: detail.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
