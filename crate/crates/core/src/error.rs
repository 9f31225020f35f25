use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty set")]
    EmptySet,

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data for subject '{subject}': has {have} instances, needs {need}")]
    InsufficientData { subject: String, have: usize, need: usize },

    #[error("non-finite loss at step {step} (active triplets {active}, last finite loss {last_loss})")]
    NonFiniteLoss { step: usize, active: usize, last_loss: f64 },

    #[error("{0}")]
    Protocol(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("format error: {0}")]
    Format(String),

    #[error("{}: {err}", path.display())]
    File {
        path: std::path::PathBuf,
        err: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches `path` to a bare I/O error.
    pub(crate) fn at(path: &std::path::Path) -> impl Fn(Error) -> Error + '_ {
        move |e| match e {
            Error::Io(err) => Error::File {
                path: path.to_path_buf(),
                err,
            },
            other => other,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
