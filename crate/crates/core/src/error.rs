use std::path::{Path, PathBuf};

use vqg_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed line-oriented input (TSV, vocabulary, word vectors).
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// Malformed or inconsistent record in a JSON array file.
    #[error("{path}: record {index}: {reason}")]
    Record {
        path: PathBuf,
        index: usize,
        reason: String,
    },

    #[error("{0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown category `{0}` (expected one of: {})", crate::dataset::CATEGORIES.join(", "))]
    UnknownCategory(String),

    #[error("image {0} is not in the feature store")]
    MissingImage(u64),

    #[error("non-finite loss at step {step} (image ids {image_ids:?}): {detail}")]
    NonFiniteLoss {
        step: u64,
        image_ids: Vec<u64>,
        detail: String,
    },

    #[error("{0}")]
    Unsupported(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// True for problems with user-supplied input rather than runtime
    /// failures.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Record { .. }
                | Error::Format(_)
                | Error::Config(_)
                | Error::UnknownCategory(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
