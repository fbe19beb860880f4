use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid bounding box: scale must be positive, got {0}")]
    InvalidBbox(f64),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("degenerate 6D rotation: {0}")]
    SingularRotation(&'static str),
    #[error("matrix is not a rotation (deviation {0:.3e})")]
    NotRotation(f64),
    #[error("invalid body model: {0}")]
    InvalidBodyModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{}:{line}: {msg}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        msg: String,
    },
    #[error("non-positive depth {0} in projection")]
    NonPositiveDepth(f64),
    #[error("translation problem is unsolvable: {0}")]
    Unsolvable(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error("plot error: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 configuration, 3 data or files, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::Parse { .. }
            | Error::InvalidBodyModel(_)
            | Error::ShapeMismatch { .. }
            | Error::Checkpoint(_)
            | Error::Archive(_)
            | Error::Plot(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::InvalidBbox(_)
            | Error::SingularRotation(_)
            | Error::NotRotation(_)
            | Error::NonPositiveDepth(_)
            | Error::Unsolvable(_)
            | Error::Degenerate(_)
            | Error::Tensor(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        what,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
