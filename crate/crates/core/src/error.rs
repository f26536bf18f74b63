use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Arguments outside their allowed range (labels, sizes, rates).
    #[error("input error: {0}")]
    Input(String),

    /// Broken invariant between a forward pass and its backward pass.
    #[error("internal consistency error: {0}")]
    Internal(String),

    /// Malformed weight, manifest or history file.
    #[error("format error: {0}")]
    Format(String),

    /// Explanation request that does not match the model.
    #[error("request error: {0}")]
    Request(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("class '{class}' has {count} images; at least 3 are required for an 80:10:10 split")]
    Stratification { class: String, count: usize },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {source}", path.display())]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
