use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter `{name}` = {value} is outside its range [{min}, {max}]")]
    OutOfRange {
        name: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite data: {0}")]
    Data(String),

    #[error("manifest schema violation: {0}")]
    Schema(String),

    #[error("manifest entry {index} references missing image {path}")]
    DanglingImage { index: usize, path: PathBuf },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error(
        "feature extractor asset not found at {path}; set `extractor = \"fallback\"` to use the \
         built-in random-feature pyramid (runs are tagged fallback-perceptual)"
    )]
    MissingAsset { path: PathBuf },

    #[error("training diverged at epoch {epoch} (non-finite loss); last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        last_good: Option<PathBuf>,
    },

    #[error("image codec: {0}")]
    Image(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::OutOfRange { .. }
                | Error::Argument(_)
                | Error::Shape(_)
                | Error::Schema(_)
                | Error::DanglingImage { .. }
                | Error::NotFound(_)
                | Error::IncompatibleVersion { .. }
                | Error::MissingAsset { .. }
        )
    }
}
