use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// The variants map onto process exit codes in the CLI (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("protocol error: endpoint answered with status {status}: {body}")]
    Protocol { status: u16, body: String },

    #[error("consensus failed: {0}")]
    Consensus(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("sample {id}: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a sample id to an error.
    pub fn for_sample(self, id: &str) -> Self {
        Error::Sample {
            id: id.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through [`Error::Sample`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Sample { source, .. } => source.root(),
            other => other,
        }
    }

    /// CLI exit code: 2 validation, 3 transport, 4 training divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Validation(_) | Error::Format(_) | Error::Parse { .. } => 2,
            Error::Transport { .. } | Error::Protocol { .. } | Error::Consensus(_) => 3,
            Error::Training { .. } => 4,
            _ => 1,
        }
    }
}
