use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or sequence dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Semantically invalid argument (bad temperature, empty input, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// A lattice or posterior grid whose slices are not normalized.
    #[error("unnormalized distribution at {context}: logsumexp = {lse:.3e}")]
    Unnormalized { context: String, lse: f64 },

    /// Checkpoint transfer failed (shape conflict or vocabulary mismatch).
    #[error("transfer error: {0}")]
    Transfer(String),

    /// On-disk format problem (checkpoint, vocab, feature file, config).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
