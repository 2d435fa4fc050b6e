use hhir_core::corpus::CorpusError;
use hhir_core::eval::EvalError;
use hhir_core::snapshot::SnapshotError;
use hhir_core::trainer::TrainError;
use hhir_core::video_io::VideoError;

/// Command failure, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<VideoError> for CliError {
    fn from(e: VideoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SnapshotError> for CliError {
    fn from(e: SnapshotError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Snapshot(s) => s.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::Usage(e.to_string()),
            EvalError::Corpus(c) => c.into(),
            _ => CliError::Other(e.to_string()),
        }
    }
}
