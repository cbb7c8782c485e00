//! Layered visual/text encoder abstraction and the dual-branch hybrid
//! forward pass.
//!
//! The encoder is pluggable: anything that can (a) embed an image into a
//! CLS + K-image-token sequence, (b) advance that sequence one transformer
//! layer at a time with an optional CLS-row attention mask, and (c) project
//! the CLS into the shared visual-textual space can drive the pipeline. The
//! built-in [`toy::ToyEncoder`] is a genuine small pre-norm transformer with
//! seeded weights, so masking and fusion exercise the same code paths a real
//! backbone adapter would.

pub mod hybrid;
pub mod toy;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::ImageData;

/// Geometry of a layered encoder: L layers, d-dim tokens, a P×P image-token
/// grid (K = P²) over a square input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayeredEncoderSpec {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub grid_side: usize,
    pub input_side: usize,
}

impl LayeredEncoderSpec {
    pub fn num_image_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Pixels per grid cell side. Input side must be divisible by the grid.
    pub fn cell_side(&self) -> usize {
        debug_assert_eq!(self.input_side % self.grid_side, 0);
        self.input_side / self.grid_side
    }
}

/// Per-layer encoder state: row 0 is the CLS token, rows 1..=K the image
/// tokens in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub layer: usize,
    pub tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn num_image_tokens(&self) -> usize {
        self.tokens.nrows() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.tokens.iter().all(|v| v.is_finite())
    }
}

/// Booleans over the image-token grid; true means the token lies inside the
/// proposal mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Attention-mask complement on the same grid.
    pub fn to_attention_mask(&self, applies_from_layer: usize) -> AttentionMaskSpec {
        AttentionMaskSpec {
            outside_tokens: self.bits.iter().map(|&b| !b).collect(),
            applies_from_layer,
        }
    }
}

/// Which image tokens the CLS query may not attend to, and from which layer
/// onward the restriction applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub outside_tokens: Vec<bool>,
    pub applies_from_layer: usize,
}

impl AttentionMaskSpec {
    pub fn applies_at(&self, layer: usize) -> bool {
        layer >= self.applies_from_layer
    }
}

/// A vector in the shared visual-textual embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> FeatureVector {
        FeatureVector {
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}

/// Cosine similarity. Errors on dimension mismatch or a zero-norm argument.
pub fn cosine(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormFeature);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// How the two branch features combine into the mask feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureStrategy {
    /// Global tokens (token-masked, scaled by beta) are progressively added
    /// into the local branch; the local CLS at the last layer is the feature.
    #[default]
    G2l,
    /// Local tokens are progressively added into the global branch; the
    /// global CLS at the last layer is the feature.
    L2g,
    /// Run both branches independently and take a weighted sum of their
    /// projected features.
    GPlusL,
    /// Local branch only (masked image, no fusion).
    LocalOnly,
    /// Global branch only (blurred context + CLS attention mask, no fusion).
    GlobalOnly,
}

impl std::str::FromStr for FeatureStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "g2l" => Ok(Self::G2l),
            "l2g" => Ok(Self::L2g),
            "g-plus-l" | "g+l" | "gplusl" => Ok(Self::GPlusL),
            "local-only" | "local" => Ok(Self::LocalOnly),
            "global-only" | "global" => Ok(Self::GlobalOnly),
            other => Err(Error::Config(format!("unknown feature strategy `{other}`"))),
        }
    }
}

/// Knobs of the hybrid forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Relative contribution of the global feature during fusion.
    pub beta: f64,
    /// First layer (1-based) at which fusion is applied; fusion then repeats
    /// at every layer through L.
    pub fusion_start_layer: usize,
    /// First layer at which the CLS attention mask is active. Defaults to
    /// `fusion_start_layer` when unset.
    pub attention_mask_start_layer: Option<usize>,
    /// Gaussian blur sigma in pixels, stated at a 224-pixel input side and
    /// scaled proportionally to the encoder's actual input side.
    pub blur_sigma: f64,
    pub strategy: FeatureStrategy,
    /// Weight of the global feature under the `GPlusL` strategy.
    pub gplusl_weight: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            fusion_start_layer: 9,
            attention_mask_start_layer: None,
            blur_sigma: 5.0,
            strategy: FeatureStrategy::G2l,
            gplusl_weight: 0.5,
        }
    }
}

impl HybridConfig {
    pub fn attention_start(&self) -> usize {
        self.attention_mask_start_layer
            .unwrap_or(self.fusion_start_layer)
    }

    /// Blur sigma scaled to the encoder input side.
    pub fn blur_sigma_for(&self, input_side: usize) -> f64 {
        self.blur_sigma * input_side as f64 / 224.0
    }

    pub fn validate(&self, spec: &LayeredEncoderSpec) -> Result<()> {
        if self.fusion_start_layer < 1 || self.fusion_start_layer > spec.num_layers {
            return Err(Error::Config(format!(
                "fusion start layer {} out of range 1..={}",
                self.fusion_start_layer, spec.num_layers
            )));
        }
        if let Some(a) = self.attention_mask_start_layer {
            if a < 1 || a > spec.num_layers {
                return Err(Error::Config(format!(
                    "attention mask start layer {a} out of range 1..={}",
                    spec.num_layers
                )));
            }
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Adapter contract for layered visual encoders.
pub trait LayeredEncoder {
    fn spec(&self) -> LayeredEncoderSpec;

    /// Patch-embed an image into the layer-0 token sequence.
    fn embed(&self, image: &ImageData) -> TokenSequence;

    /// Advance the sequence through layer `layer` (1-based). When a mask is
    /// given and active at this layer, CLS-query attention logits to outside
    /// tokens are nullified before normalization; all other rows untouched.
    fn run_layer(
        &self,
        layer: usize,
        seq: &TokenSequence,
        mask: Option<&AttentionMaskSpec>,
    ) -> Result<TokenSequence>;

    /// Project the sequence summary into the shared visual-textual space.
    fn project_cls(&self, seq: &TokenSequence) -> FeatureVector;
}

/// Adapter contract for text encoders.
pub trait TextEncoder {
    fn encode_text(&self, text: &str) -> Result<FeatureVector>;
}

pub use hybrid::{
    encode_with_strategy, hybrid_encode, preprocess_global, preprocess_local, semantic_scores,
    token_mask_of,
};
pub use toy::{ToyEncoder, ToyEncoderConfig};
