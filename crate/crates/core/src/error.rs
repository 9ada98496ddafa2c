use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value violates its invariant (even kernel size, bad channel list, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("cannot encode image {path}: {message}")]
    ImageEncode { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint {path} has format version {found}, this build reads {expected}")]
    CheckpointVersion {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error(
        "feature extractor weights unavailable at {path}: {message}. Export the torchvision \
         VGG-19 `features` state dict to safetensors (tensor names `features.<idx>.weight` / \
         `features.<idx>.bias`) and point `vgg_weights` at the file"
    )]
    ExtractorUnavailable { path: PathBuf, message: String },

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("flow estimation failed at {context}: {message}")]
    Flow { context: String, message: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("malformed record in {path} line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
