use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("circulant embedding is not nonnegative definite (negative mass {negative:.3e} of trace {trace:.3e})")]
    EmbeddingNotPsd { negative: f64, trace: f64 },

    #[error("degenerate mixture component: {0}")]
    DegenerateComponent(String),

    #[error("forward model produced non-finite output for {failed} of {total} members")]
    ForwardFailure { failed: usize, total: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
