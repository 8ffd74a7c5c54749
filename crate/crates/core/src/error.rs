use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid k: {k} (must satisfy {min} <= k <= {max})")]
    InvalidK { k: usize, min: usize, max: usize },

    #[error("empty graph: pooling needs at least one node")]
    EmptyGraph,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("config validation failed: {0}")]
    ConfigValidation(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("non-finite loss at step {step}: total={total} cls={cls} sgc={sgc}")]
    NonFiniteLoss {
        step: u64,
        total: f64,
        cls: f64,
        sgc: f64,
    },

    #[error("teacher isolation violated: optimizer holds teacher tensor `{0}`")]
    TeacherIsolation(String),

    #[error("dataset not found: {}", .0.display())]
    DatasetNotFound(PathBuf),

    #[error("empty class directory `{0}`")]
    EmptyClass(String),

    #[error("bad file format in {context}: {message}")]
    Format { context: String, message: String },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            message: message.into(),
        }
    }
}
