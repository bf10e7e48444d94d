use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical divergence at iteration {iteration}: loss = {loss}")]
    NumericalDivergence { iteration: usize, loss: f64 },

    #[error("aspect objective unbounded below at iteration {iteration}: loss = {loss} < floor {floor}")]
    UnboundedObjective { iteration: usize, loss: f64, floor: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A refinement failure attributed to one work item.
    #[error("sentence {sentence_id}, target {target_id}, aspect {aspect}: {source}")]
    WorkItem {
        sentence_id: String,
        target_id: String,
        aspect: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Io { .. } | Error::Shape(_) => 2,
            Error::NumericalDivergence { .. } | Error::UnboundedObjective { .. } => 3,
            Error::UndefinedMetric(_) => 4,
            Error::WorkItem { source, .. } => source.exit_code(),
        }
    }
}
