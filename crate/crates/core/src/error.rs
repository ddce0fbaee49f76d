//! Crate-wide error type. Every fallible public operation returns
//! [`Result`]; error variants carry enough context to act on the failure
//! (which shapes clashed, which file was short, which hash differed).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes (or a shape-derived quantity such as a flat index)
    /// do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A geometric box failed validation (x2 <= x1 or y2 <= y1), or an
    /// operation received a box it cannot use.
    #[error("invalid box: {0}")]
    InvalidBox(String),

    /// Bad configuration value or unparsable config file.
    #[error("config error: {0}")]
    Config(String),

    /// Input data (image, annotation file, dataset layout) is unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A descriptor with the wrong origin tag reached a head or block
    /// that is restricted to one origin.
    #[error("origin mismatch: {0}")]
    OriginMismatch(String),

    /// Checkpoint bytes are malformed or shorter than the manifest claims.
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// Checkpoint was produced under a different configuration; both
    /// hashes are printed so the caller can locate the divergence.
    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    /// A gradient became NaN or infinite; `name` identifies the weight.
    #[error("non-finite gradient in '{name}' at iteration {iteration}")]
    NonFiniteGradient { name: String, iteration: u64 },

    /// ROC construction requires at least one instance of each class.
    #[error("roc requires at least one {missing} instance")]
    SingleClass { missing: &'static str },

    /// FROC over an empty scan set is undefined.
    #[error("froc requires a non-empty scan set")]
    EmptyScanSet,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}
