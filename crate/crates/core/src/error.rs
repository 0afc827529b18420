use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaupsiError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerical input error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("shape mismatch in {}: {detail}", .path.display())]
    ShapeMismatch { path: PathBuf, detail: String },

    #[error("label out of range in sample {sample}: task {task} has {classes} classes, got {label}")]
    LabelOutOfRange {
        sample: String,
        task: &'static str,
        label: usize,
        classes: usize,
    },

    #[error("malformed data: {0}")]
    Data(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CaupsiError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CaupsiError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class: 2 config, 3 data, 4 numeric, 5 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CaupsiError::Config(_) | CaupsiError::Contract(_) | CaupsiError::MissingParam(_) | CaupsiError::Shape(_) => 2,
            CaupsiError::MissingFile(_)
            | CaupsiError::ShapeMismatch { .. }
            | CaupsiError::LabelOutOfRange { .. }
            | CaupsiError::Data(_)
            | CaupsiError::Checkpoint(_) => 3,
            CaupsiError::Numeric(_) | CaupsiError::Training(_) => 4,
            CaupsiError::Io { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, CaupsiError>;
