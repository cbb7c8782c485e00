//! Training-free referring image segmentation.
//!
//! Given an image, a set of candidate masks, and a natural-language
//! expression, the pipeline scores every candidate by fusing two signals and
//! selects the argmax mask:
//!
//! * a semantic alignment score from a hybrid global-local feature: a
//!   dual-branch layered encoder pass where blurred, attention-masked global
//!   context is progressively injected into the masked local branch;
//! * a spatial guidance score built from parsed spatial relations, a
//!   text-conditioned coherence map, and positional gradient priors.
//!
//! Everything runs deterministically on the built-in seeded toy encoder; real
//! backbones plug in behind the [`encoder::LayeredEncoder`] /
//! [`encoder::TextEncoder`] / [`guidance::LocalizationProvider`] traits.

pub mod config;
pub mod encoder;
pub mod error;
pub mod guidance;
pub mod imgproc;
pub mod mask;
pub mod parse;
pub mod pipeline;
pub mod proposals;
pub mod scenes;

pub use config::{EncoderChoice, RunConfig};
pub use error::{Error, Result};
pub use imgproc::ImageData;
pub use mask::{bbox_and_center, mask_iou, rle_decode, rle_encode, BinaryMask, BoundingBox, Rle};
pub use pipeline::{segment, AblationFlags, EvalItem, EvalReport, PipelineContext, Sample};
