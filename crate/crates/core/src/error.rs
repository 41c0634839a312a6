use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor did not have the shape an operation requires.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An argument violated an operation's precondition.
    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// A file was readable but its contents were malformed.
    #[error("{path}: malformed: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// Prefix the message with `what`, keeping the error class.
    pub fn within(self, what: impl std::fmt::Display) -> Self {
        match self {
            Error::Shape { op, detail } => Error::Shape { op, detail: format!("{what}: {detail}") },
            Error::InvalidArgument { op, detail } => Error::InvalidArgument { op, detail: format!("{what}: {detail}") },
            Error::Io { context, source } => Error::Io { context: format!("{what}: {context}"), source },
            Error::Format { path, detail } => Error::Format { path, detail: format!("{what}: {detail}") },
            Error::NotFound(s) => Error::NotFound(format!("{what}: {s}")),
            Error::Config(s) => Error::Config(format!("{what}: {s}")),
        }
    }

    /// True for errors that signal a broken shape or operation contract
    /// rather than bad user input or IO.
    pub fn is_contract_violation(&self) -> bool {
        matches!(self, Error::Shape { .. } | Error::InvalidArgument { .. })
    }
}
