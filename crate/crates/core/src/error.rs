use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: non-positive output size for input {input} ({detail})")]
    EmptyOutput {
        op: &'static str,
        input: Shape,
        detail: String,
    },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("keypoints are in the {actual} frame, expected {expected}")]
    WrongFrame {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dataset: {0}")]
    Dataset(String),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn mismatch(
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            dim,
            expected,
            actual,
        }
    }
}
