use crate::types::PixelGrid;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("grid mismatch: expected {expected}, found {found}")]
    GridMismatch { expected: PixelGrid, found: PixelGrid },

    #[error("class set mismatch: expected {expected} classes, found {found}")]
    ClassSetMismatch { expected: usize, found: usize },

    #[error("non-finite value at pixel {pixel}, class {class}")]
    NonFiniteValue { pixel: usize, class: usize },

    #[error("negative value at pixel {pixel}, class {class}")]
    NegativeValue { pixel: usize, class: usize },

    #[error("pixel {pixel} has a zero-sum probability vector")]
    DegeneratePixel { pixel: usize },

    #[error("pixel {pixel} is not on the probability simplex")]
    NotOnSimplex { pixel: usize },

    #[error("annotation has no scribbled pixels")]
    EmptyAnnotation,

    #[error("pixel {pixel} is unlabeled where a label is required")]
    UnlabeledPixel { pixel: usize },

    #[error("class id {class} outside 0..{num_classes}")]
    InvalidClass { class: u32, num_classes: usize },

    #[error("pixel {pixel} is scribbled twice with conflicting classes {first} and {second}")]
    DuplicateScribble { pixel: usize, first: u8, second: u8 },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("instance has {pixels} pixels, above the exact-evaluation cap of {cap}")]
    InstanceTooLarge { pixels: usize, cap: usize },

    #[error("nothing to evaluate: confusion matrix is empty")]
    EmptyEvaluation,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
