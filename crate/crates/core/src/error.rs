use std::path::PathBuf;

use thiserror::Error;

use crate::narrative::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A record failed validation while loading an input file.
    #[error("{path}:{line}: field `{field}`: {reason}")]
    Record {
        path: PathBuf,
        line: usize,
        field: String,
        reason: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("narrative parse error: {0}")]
    Narrative(#[from] ParseError),

    #[error("frame decoder failed (status {status}): {diagnostics}")]
    Decode { status: String, diagnostics: String },

    #[error("cassette replay miss for fingerprint {fingerprint} ({summary})")]
    ReplayMiss { fingerprint: String, summary: String },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("endpoint returned status {status}: {excerpt}")]
    Protocol { status: u16, excerpt: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 backend, 3 replay miss.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ReplayMiss { .. } => 3,
            Error::Transport { .. } | Error::Protocol { .. } => 2,
            _ => 1,
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::ReplayMiss { .. } | Error::Transport { .. } | Error::Protocol { .. }
        )
    }
}
