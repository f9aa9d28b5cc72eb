use std::path::PathBuf;

/// Errors raised anywhere in the simulation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("label {label} out of range for a {width}-way output")]
    LabelOutOfRange { label: usize, width: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("prototype phase mismatch: {0}")]
    PhaseMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {message}", path.display())]
    Schema { path: PathBuf, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("round plan is for round {found}, but the state expects round {expected}")]
    RoundMismatch { expected: usize, found: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("round {round}, {stage}: {source}")]
    Stage {
        round: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, round: usize, stage: &'static str) -> Self {
        Error::Stage {
            round,
            stage,
            source: Box::new(self),
        }
    }

    /// True for problems with the user's inputs (config, data files) as
    /// opposed to failures while the simulation runs.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Schema { .. } | Error::EmptyDataset | Error::Checkpoint(_) => {
                true
            }
            Error::Io { .. } => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
