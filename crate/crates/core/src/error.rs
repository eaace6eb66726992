use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("invalid annotation for image `{image_id}` ({field}): {message}")]
    Validation {
        image_id: String,
        field: String,
        message: String,
    },

    #[error("dataset integrity violated: {0}")]
    Integrity(String),

    #[error("exemplar box {index} {bbox} degenerates below 1x1 pixel after resize")]
    DegenerateExemplar { index: usize, bbox: String },

    #[error("annotation has no dots")]
    EmptyAnnotation,

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("image too small: {height}x{width}, need at least 32x32")]
    ImageTooSmall { height: usize, width: usize },

    #[error("kernel {kernel_h}x{kernel_w} larger than feature grid {grid_h}x{grid_w}")]
    KernelTooLarge {
        kernel_h: usize,
        kernel_w: usize,
        grid_h: usize,
        grid_w: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("cancelled")]
    Cancelled,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(
        image_id: impl Into<String>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Validation {
            image_id: image_id.into(),
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
