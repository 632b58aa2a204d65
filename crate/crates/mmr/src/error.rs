use thiserror::Error;

/// Crate-wide error type. `exit_code` maps validation problems to 1 and
/// runtime failures to 2 for the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad tensor file {path}: {detail}")]
    BadTensorFile { path: String, detail: String },

    #[error("manifest error at line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Manifest { .. } => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
