use nlmvs_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("file format: {0}")]
    Format(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MvsError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MvsError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MvsError::Numerical(_) | MvsError::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = MvsError> = std::result::Result<T, E>;
