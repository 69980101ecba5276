use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("permission denied: {0}")]
    Permission(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("black-box loss returned {value} at {}", match .direction { Some(i) => format!("direction {i}"), None => "the base point".to_string() })]
    Estimation { direction: Option<usize>, value: f64 },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("query failure on api {api_id} after {queries} queries: {reason}")]
    Query { api_id: usize, queries: u64, reason: String },
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
