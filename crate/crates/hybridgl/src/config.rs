//! Merged run configuration: hybrid, guidance, and proposal knobs plus
//! encoder selection, ablation flags, and the seed. Unknown keys are
//! rejected when loading from a file.

use serde::{Deserialize, Serialize};

use crate::encoder::toy::ToyEncoderConfig;
use crate::encoder::{FeatureStrategy, HybridConfig, LayeredEncoderSpec};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::pipeline::AblationFlags;
use crate::proposals::ProposalGenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderChoice {
    Toy(ToyEncoderConfig),
    /// Placeholder for a real backbone adapter registered by name.
    Adapter {
        name: String,
    },
}

impl Default for EncoderChoice {
    fn default() -> Self {
        EncoderChoice::Toy(ToyEncoderConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct RunConfig {
    // score fusion and guidance
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_big: f64,
    pub lambda_small: f64,
    pub top_k: usize,
    pub within_containment: f64,
    pub softmax_temperature: f64,
    // hybrid feature extraction
    pub beta: f64,
    pub fusion_start_layer: usize,
    pub attention_mask_start_layer: Option<usize>,
    pub blur_sigma: f64,
    pub strategy: FeatureStrategy,
    pub gplusl_weight: f64,
    // proposal generation/filtering
    pub predicted_iou_threshold: f64,
    pub stability_score_threshold: f64,
    pub points_per_side: usize,
    // run plumbing
    pub encoder: EncoderChoice,
    pub ablation: AblationFlags,
    pub seed: u64,
    pub workers: usize,
    pub coherence_fallback_ones: bool,
    /// Optional text prompt template with `{}` for the raw expression.
    pub text_template: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            lambda: 9.0,
            lambda_big: 3.0,
            lambda_small: 14.0,
            top_k: 5,
            within_containment: 0.9,
            softmax_temperature: 1.0,
            beta: 2.0,
            fusion_start_layer: 9,
            attention_mask_start_layer: None,
            blur_sigma: 5.0,
            strategy: FeatureStrategy::G2l,
            gplusl_weight: 0.5,
            predicted_iou_threshold: 0.7,
            stability_score_threshold: 0.7,
            points_per_side: 8,
            encoder: EncoderChoice::default(),
            ablation: AblationFlags::default(),
            seed: 17,
            workers: 1,
            coherence_fallback_ones: false,
            text_template: None,
        }
    }
}

impl RunConfig {
    /// Parse a TOML config file. Unknown keys are rejected.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            lambda_big: self.lambda_big,
            lambda_small: self.lambda_small,
            top_k: self.top_k,
            within_containment: self.within_containment,
            softmax_temperature: self.softmax_temperature,
        }
    }

    pub fn proposal_config(&self) -> ProposalGenConfig {
        ProposalGenConfig {
            predicted_iou_threshold: self.predicted_iou_threshold,
            stability_score_threshold: self.stability_score_threshold,
            points_per_side: self.points_per_side,
        }
    }

    /// Hybrid config resolved against a concrete encoder geometry. The
    /// default fusion start layer is stated for a 12-layer backbone; for a
    /// shallower encoder it is rescaled proportionally (9 -> 3 on the
    /// 4-layer toy) unless the configured value is already in range.
    pub fn hybrid_config(&self, spec: &LayeredEncoderSpec) -> HybridConfig {
        let resolve = |layer: usize| -> usize {
            if layer <= spec.num_layers {
                layer
            } else {
                ((layer * spec.num_layers + 6) / 12).clamp(1, spec.num_layers)
            }
        };
        HybridConfig {
            beta: self.beta,
            fusion_start_layer: resolve(self.fusion_start_layer),
            attention_mask_start_layer: self.attention_mask_start_layer.map(resolve),
            blur_sigma: self.blur_sigma,
            strategy: self.strategy,
            gplusl_weight: self.gplusl_weight,
        }
    }
}
