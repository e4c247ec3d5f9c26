use thiserror::Error;

use crate::decoder::StepTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Timeouts and broken connections. The request may be retried on a fresh
    /// connection.
    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {message} (payload: {excerpt:?})")]
    Protocol { message: String, excerpt: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("decode aborted at step {step}: {source}")]
    DecodeAborted {
        step: usize,
        #[source]
        source: Box<Error>,
        /// Traces of the steps that completed before the failure.
        partial: Vec<StepTrace>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }

    /// True for errors caused by bad configuration or arguments rather than
    /// by a failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::InvalidConfig(_))
    }

    pub(crate) fn protocol(message: impl Into<String>, payload: &str) -> Self {
        const MAX: usize = 160;
        let excerpt = if payload.len() > MAX {
            let mut end = MAX;
            while !payload.is_char_boundary(end) {
                end -= 1;
            }
            format!("{}...", &payload[..end])
        } else {
            payload.to_string()
        };
        Error::Protocol {
            message: message.into(),
            excerpt,
        }
    }
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
