use std::path::PathBuf;

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    /// An internal invariant was broken. This is a bug, not bad input.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("{}:{line}: {msg}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by `{op}` during gradient computation")]
    Gradient { op: String },

    #[error("undefined metrics: {0}")]
    UndefinedMetrics(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("bad model file: {0}")]
    Format(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {msg}", path.display())]
    Image { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
