use thiserror::Error;

use crate::scene_model::ObjectState;

/// Errors produced by the estimation pipeline and its file formats.
#[derive(Debug, Clone, Error)]
pub enum GroundPoseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A transformed keypoint landed on or behind the image plane.
    #[error("object {object}: keypoint {keypoint} is behind the camera (z = {depth:.6})")]
    BehindCamera {
        object: String,
        keypoint: usize,
        depth: f64,
    },

    #[error("underdetermined: {usable} usable keypoints, need at least {required}")]
    Underdetermined { usable: usize, required: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// The local solver could not decrease the loss; carries the best iterate seen.
    #[error("no progress (best loss {loss:.6e})")]
    NoProgress { best: Box<ObjectState>, loss: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid plane: normal (v_a, v_b, v_c) is zero")]
    InvalidPlane,

    #[error("focal length unobservable: |v_c| = {v_c:.3e} of the translation plane is below {eps:.1e}")]
    UnobservableFocal { v_c: f64, eps: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("scene has no solvable detections")]
    EmptyScene,

    /// Schema problem in an input document.
    #[error("parse error in {location}: field `{field}`: {message}")]
    Parse {
        location: String,
        field: String,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T, E = GroundPoseError> = std::result::Result<T, E>;

impl GroundPoseError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
