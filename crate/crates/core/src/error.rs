use thiserror::Error;

/// Errors raised by the decoding, training and data-construction routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or parameters that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A token sequence that violates the reasoning-trace layout.
    #[error("malformed trace: {0}")]
    MalformedTrace(String),

    /// An API used out of order or with out-of-range arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// A loss or activation became NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Failure reported by a model implementation.
    #[error("model error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
