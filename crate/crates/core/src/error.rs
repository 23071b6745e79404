//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Precondition violation on an operation's inputs.
    #[error("domain error: {0}")]
    Domain(String),

    /// All points of a cloud coincide; unit-sphere normalization is undefined.
    #[error("degenerate point cloud: all points identical")]
    DegenerateCloud,

    /// A feature mix collapsed to the zero vector and cannot be renormalized.
    #[error("degenerate mix: zero-norm feature combination")]
    DegenerateMix,

    /// Encoder produced a zero pre-normalization output (dead network).
    #[error("degenerate feature: encoder output has zero norm")]
    DegenerateFeature,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// Binary format violation, located by absolute byte offset.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("duplicate sample id {0}")]
    DuplicateId(u64),

    #[error("sample id {0} missing from {1} cache")]
    MissingCacheId(u64, String),

    /// Anchor construction could not satisfy the separation invariant.
    #[error("anchor construction failed: {0}")]
    AnchorConstruction(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
