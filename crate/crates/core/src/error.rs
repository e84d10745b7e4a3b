use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("axis {axis} out of range for tensor of rank {rank}")]
    Index { axis: usize, rank: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("EDF parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("annotation error in block `{block}`: {message}")]
    Annotation { block: String, message: String },

    #[error("missing channels: {}", .0.join(", "))]
    ChannelMissing(Vec<String>),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("segment archive error: {0}")]
    Archive(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
