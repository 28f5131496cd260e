//! Crate-wide error type.
//!
//! Every fallible operation in the library returns [`Error`]. The CLI maps
//! error categories to process exit codes, so each variant belongs to exactly
//! one [`ErrorCategory`].

use std::fmt;

/// What went wrong, coarsely. The CLI exit code is derived from this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration: unknown flags, unreadable config, invalid values.
    Config,
    /// Bad or missing data: scene files, vocabularies, feature DBs, checkpoints.
    Data,
    /// A remote backend failed: transport errors, HTTP status, rate limits.
    Backend,
    /// A verification step failed (gradient checks and similar).
    Verification,
}

impl ErrorCategory {
    /// Process exit code for this category.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Backend => 4,
            ErrorCategory::Verification => 5,
        }
    }

    /// Stable machine-parsable code printed on the CLI error line.
    pub fn code(self) -> &'static str {
        match self {
            ErrorCategory::Config => "E_CONFIG",
            ErrorCategory::Data => "E_DATA",
            ErrorCategory::Backend => "E_BACKEND",
            ErrorCategory::Verification => "E_VERIFY",
        }
    }
}

/// Distinguishes backend failure modes so callers can retry sensibly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendErrorKind {
    /// Connection, DNS, or I/O failure before a response arrived.
    Transport,
    /// Server answered with a non-2xx status other than 429.
    Status(u16),
    /// Server answered 429; the client may retry after a delay.
    RateLimited,
    /// Response arrived but did not have the expected shape.
    Malformed,
}

impl fmt::Display for BackendErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendErrorKind::Transport => write!(f, "transport"),
            BackendErrorKind::Status(s) => write!(f, "status {s}"),
            BackendErrorKind::RateLimited => write!(f, "rate limited"),
            BackendErrorKind::Malformed => write!(f, "malformed response"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor op rejected its inputs. `detail` names both shapes.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Autodiff misuse: backward twice, grad of a non-grad tensor, and so on.
    #[error("autodiff error: {0}")]
    Autodiff(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("backend error ({kind}): {detail}")]
    Backend { kind: BackendErrorKind, detail: String },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape { .. } | Error::Autodiff(_) | Error::Data(_) | Error::Io { .. } => {
                ErrorCategory::Data
            }
            Error::Config(_) => ErrorCategory::Config,
            Error::Backend { .. } => ErrorCategory::Backend,
            Error::Verification(_) => ErrorCategory::Verification,
        }
    }

    /// Attaches a path to a raw I/O error.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
