use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid frequency schedule: {0}")]
    Schedule(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input of {len} tokens exceeds context window {max}")]
    Context { len: usize, max: usize },

    #[error("token id {token} outside vocabulary of size {vocab}")]
    Vocab { token: u32, vocab: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("training error in parameter `{param}`: {msg}")]
    Training { param: String, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schedule(_) | Error::Config(_) | Error::Json(_) | Error::Checkpoint(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Length(_) | Error::Context { .. } => 3,
            Error::Vocab { .. } | Error::Range(_) | Error::Dimension(_) => 3,
            Error::NonFinite(_) | Error::Training { .. } | Error::Evaluation(_) => 4,
        }
    }
}
