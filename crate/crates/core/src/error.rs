use thiserror::Error;

use crate::vocabulary::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("image is {width}x{height} but the filter support is {support}x{support}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        support: usize,
    },

    #[error("layer-1 edge models have not been estimated")]
    Layer1NotEstimated,

    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    #[error("no such state in the inference graph: {0:?}")]
    UnknownState(crate::inference::NodeRef),

    #[error("support has fewer than two distinct points")]
    DegenerateSupport,

    #[error("descriptor binning mismatch: {0:?} vs {1:?}")]
    BinningMismatch((usize, usize), (usize, usize)),

    #[error("unsupported vocabulary format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt vocabulary file: {0}")]
    Corrupt(String),

    #[error("vocabulary failed validation ({} violation(s)); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),

    #[error("no positive examples: {0}")]
    NoPositives(String),

    #[error("sharing is undefined with fewer than two classes")]
    TooFewClasses,

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("duplicate ground-truth image id {0:?}")]
    DuplicateImage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
