use std::path::PathBuf;

use octdistill_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid model configuration: {0}")]
    ModelConfig(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor `{0}` does not exist in the model")]
    UnknownTensor(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("optimizer: {0}")]
    Optim(String),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("data: {0}")]
    Data(String),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("training: {0}")]
    Training(String),
    #[error("evaluation: {0}")]
    Eval(String),
}

impl Error {
    /// Short machine-readable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Autodiff(_) => "numeric",
            Error::Io { .. } => "io",
            Error::ModelConfig(_) => "model",
            Error::Format(_) | Error::ShapeMismatch { .. } | Error::UnknownTensor(_) | Error::MissingTensor(_) => {
                "checkpoint"
            }
            Error::Optim(_) => "optim",
            Error::Augment(_) => "augment",
            Error::Manifest { .. } | Error::Data(_) | Error::Image { .. } => "data",
            Error::Config(_) => "config",
            Error::Training(_) => "training",
            Error::Eval(_) => "eval",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
