use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("{0} is not supported for this loss kind")]
    Unsupported(&'static str),

    #[error("training diverged at epoch {epoch}{}", batch.map(|b| format!(", batch {b}")).unwrap_or_default())]
    Divergence { epoch: usize, batch: Option<usize> },

    #[error("design matrix is rank deficient (condition estimate {0:.3e})")]
    RankDeficient(f64),

    #[error("LP size cap exceeded: {rows} rows > cap {cap}; use gradient descent (fit_gd) instead")]
    Capacity { rows: usize, cap: usize },

    #[error("LP solver finished with status {0:?}")]
    Solver(crate::lp::LpStatus),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown learner `{0}`")]
    UnknownLearner(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
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
