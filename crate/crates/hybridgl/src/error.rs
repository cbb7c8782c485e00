//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("empty mask")]
    EmptyMask,
    #[error("empty text")]
    EmptyText,
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unknown position cue `{0}`")]
    UnknownPositionCue(String),
    #[error("zero-norm feature vector")]
    ZeroNormFeature,
    #[error("feature dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite activation at layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("no proposals for image `{image_id}`")]
    NoProposals { image_id: String },
    #[error("no proposal source for image `{image_id}`: no cache file and no provider")]
    MissingProposalSource { image_id: String },
    #[error("proposal {index} of image `{image_id}`: mask shape {mask_h}x{mask_w} does not match image {image_h}x{image_w}")]
    ProposalShapeMismatch {
        image_id: String,
        index: usize,
        mask_h: usize,
        mask_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("invalid run-length encoding: {0}")]
    InvalidRle(String),
    #[error("localization provider failed: {0}")]
    Provider(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("score lists have different lengths: {left} vs {right}")]
    ScoreLengthMismatch { left: usize, right: usize },
    #[error("empty score table")]
    EmptyScores,
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
