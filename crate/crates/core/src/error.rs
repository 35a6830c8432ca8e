use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quaternion (norm {norm:e})")]
    DegenerateQuaternion { norm: f64 },

    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),

    #[error("temporal length K={0} outside [2, 32]")]
    InvalidK(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: {msg}", .path.display())]
    PoseParse { path: PathBuf, line: usize, msg: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("sequence of {len} frames is shorter than K={k}")]
    SequenceTooShort { len: usize, k: usize },

    #[error("non-finite loss at iteration {iteration} (lr {lr:e}, window {window})")]
    NonFiniteLoss { iteration: u64, lr: f64, window: String },

    #[error("unknown scene `{0}`")]
    UnknownScene(String),

    #[error("scene `{0}` already registered (pass overwrite to replace it)")]
    SceneExists(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("image {}: {msg}", .path.display())]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
