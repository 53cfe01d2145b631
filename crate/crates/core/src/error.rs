use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("invalid annotation for video `{video}`{}: {message}", .index.map(|i| format!(" (instance {i})")).unwrap_or_default())]
    Validation {
        video: String,
        index: Option<usize>,
        message: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cannot generate video {video_index}: {message}")]
    Generation { video_index: usize, message: String },

    #[error("dataset not found at {0}")]
    DatasetMissing(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged in {stage} at step {step} (batch {batch}); last good epoch {last_good_epoch:?}")]
    Diverged {
        stage: &'static str,
        step: usize,
        batch: usize,
        last_good_epoch: Option<usize>,
    },

    #[error("loss has no weighted anchors")]
    EmptyLoss,

    #[error("ground truth contains no instances")]
    EmptyGroundTruth,

    #[error("every learning rate in the grid diverged ({} tried)", .table.len())]
    AllLearningRatesDiverged { table: Vec<(f64, Option<f64>)> },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}
