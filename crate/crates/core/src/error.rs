use std::path::PathBuf;

/// Errors produced anywhere in the fine-tuning lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: String,
        got: String,
    },

    #[error("batchnorm: degenerate batch, train mode needs at least 2 elements per channel (got {0})")]
    DegenerateBatch(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("numeric failure in `{context}`: {reason}")]
    Numeric { context: String, reason: String },

    #[error("stage {stage} out of range 1..={stages}")]
    StageRange { stage: usize, stages: usize },

    #[error("cannot classify parameter `{0}`")]
    Classification(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("checkpoints differ: {}", .0.join(", "))]
    Comparison(Vec<String>),

    #[error("split error: class {class} has {available} samples, requested {requested}")]
    Split {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("{}: {source}", path.display())]
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
    pub(crate) fn dim(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
