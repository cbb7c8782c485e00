//! End-to-end orchestration: proposals -> hybrid features -> parsing ->
//! guidance -> winner, plus dataset evaluation with oIoU/mIoU.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    cosine, encode_with_strategy, FeatureVector, HybridConfig, LayeredEncoder, TextEncoder,
};
use crate::error::{Error, Result};
use crate::guidance::{
    coherence_map, compose_guidance, fuse_scores, relational_semantic_scores, spatial_score,
    GuidanceConfig, GuidanceKind, GuidanceMap, LocalizationProvider, ScoreTable,
};
use crate::imgproc::{blend_mask, ImageData};
use crate::mask::{intersection_union, BinaryMask};
use crate::parse::{parse_expression, ParsedExpression};
use crate::proposals::ProposalSet;

/// Which guidance components are switched off for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_relations: bool,
    pub no_coherence: bool,
    pub no_position: bool,
}

impl AblationFlags {
    pub fn set(&mut self, name: &str) -> Result<()> {
        match name {
            "no-relations" => self.no_relations = true,
            "no-coherence" => self.no_coherence = true,
            "no-position" => self.no_position = true,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation `{other}` (expected no-relations, no-coherence, no-position)"
                )))
            }
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.no_relations {
            v.push("no-relations");
        }
        if self.no_coherence {
            v.push("no-coherence");
        }
        if self.no_position {
            v.push("no-position");
        }
        v
    }
}

/// Everything `segment` needs besides the image and expression.
pub struct PipelineContext<'a> {
    pub visual: &'a (dyn LayeredEncoder + Sync),
    pub text: &'a (dyn TextEncoder + Sync),
    pub localizer: Option<&'a (dyn LocalizationProvider + Sync)>,
    pub hybrid: HybridConfig,
    pub guidance: GuidanceConfig,
    pub ablation: AblationFlags,
    /// Substitute the all-ones coherence map (with a warning) instead of
    /// failing when the localization provider errors.
    pub coherence_fallback_ones: bool,
}

/// The winning mask plus everything needed to inspect the decision.
#[derive(Debug, Clone)]
pub struct SegmentOutcome {
    pub winner_index: usize,
    pub winner_mask: BinaryMask,
    pub table: ScoreTable,
    pub parsed: ParsedExpression,
    pub guidance: GuidanceMap,
}

/// Score every proposal against the expression and select the argmax mask.
///
/// The relational path is used when the parsed expression carries relations
/// (falling back to plain cosine scores if no proposal pair satisfies any of
/// them); guidance composition and score fusion always run.
pub fn segment(
    image: &ImageData,
    expression: &str,
    proposals: &ProposalSet,
    ctx: &PipelineContext<'_>,
) -> Result<SegmentOutcome> {
    if proposals.is_empty() {
        return Err(Error::NoProposals {
            image_id: proposals.image_id.clone(),
        });
    }
    let parsed = parse_expression(expression)?;

    // hybrid features, gathered in proposal-index order
    let features: Vec<FeatureVector> = proposals
        .proposals
        .iter()
        .map(|p| encode_with_strategy(image, &p.mask, ctx.visual, &ctx.hybrid))
        .collect::<Result<_>>()?;

    let text_feature = ctx.text.encode_text(expression)?;
    let plain_scores = || -> Result<Vec<f64>> {
        features.iter().map(|f| cosine(f, &text_feature)).collect()
    };
    let semantic: Vec<f64> = if !ctx.ablation.no_relations && !parsed.relations.is_empty() {
        let relational =
            relational_semantic_scores(proposals, &parsed, &features, ctx.text, &ctx.guidance)?;
        if relational.iter().all(|&s| s == 0.0) {
            // no pair satisfied any relation; a winner must still exist
            plain_scores()?
        } else {
            relational
        }
    } else {
        plain_scores()?
    };

    let coherence = if ctx.ablation.no_coherence || ctx.localizer.is_none() {
        GuidanceMap::ones(image.height(), image.width(), GuidanceKind::Coherence)
    } else {
        match coherence_map(image, expression, ctx.localizer.unwrap()) {
            Ok(map) => map,
            Err(err) if ctx.coherence_fallback_ones => {
                log::warn!("localization provider failed ({err}); using all-ones coherence");
                GuidanceMap::ones(image.height(), image.width(), GuidanceKind::Coherence)
            }
            Err(err) => return Err(err),
        }
    };
    let cues = if ctx.ablation.no_position {
        Default::default()
    } else {
        parsed.position_cues.clone()
    };
    let guidance = compose_guidance(&coherence, &cues);

    let lambda = ctx.guidance.lambda_for(parsed.size_cue);
    let spatial: Vec<f64> = proposals
        .proposals
        .iter()
        .map(|p| spatial_score(&guidance, &p.mask, lambda))
        .collect();

    let table = fuse_scores(
        &semantic,
        &spatial,
        ctx.guidance.alpha,
        ctx.guidance.softmax_temperature,
    )?;
    let winner_index = table.winner_index;
    Ok(SegmentOutcome {
        winner_index,
        winner_mask: proposals.proposals[winner_index].mask.clone(),
        table,
        parsed,
        guidance,
    })
}

/// One dataset sample: an image reference, the expression, and ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub image_path: Option<std::path::PathBuf>,
    pub expression: String,
    pub gt_mask: BinaryMask,
}

/// A sample with its image and proposals materialized.
pub struct EvalItem {
    pub sample: Sample,
    pub image: ImageData,
    pub proposals: ProposalSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResult {
    pub image_id: String,
    pub iou: f64,
    pub winner_index: Option<usize>,
    pub error: Option<String>,
}

/// Evaluation metrics plus the per-sample breakdown and the exact
/// configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub oiou: f64,
    pub miou: f64,
    pub per_sample: Vec<SampleResult>,
    pub config: serde_json::Value,
    pub ablation: AblationFlags,
}

impl EvalReport {
    /// Fraction of samples whose winner equals the ground truth exactly.
    pub fn exact_accuracy(&self) -> f64 {
        if self.per_sample.is_empty() {
            return 0.0;
        }
        self.per_sample.iter().filter(|s| s.iou == 1.0).count() as f64
            / self.per_sample.len() as f64
    }

    /// Aligned-column text table.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let id_width = self
            .per_sample
            .iter()
            .map(|s| s.image_id.len())
            .max()
            .unwrap_or(8)
            .max(8);
        out.push_str(&format!("{:<id_width$}  {:>8}  note\n", "image_id", "iou"));
        for s in &self.per_sample {
            let note = s.error.as_deref().unwrap_or("");
            out.push_str(&format!(
                "{:<id_width$}  {:>8.4}  {}\n",
                s.image_id, s.iou, note
            ));
        }
        out.push_str(&format!(
            "{:<id_width$}  {:>8.4}\n{:<id_width$}  {:>8.4}\n",
            "oIoU", self.oiou, "mIoU", self.miou
        ));
        out
    }
}

fn evaluate_one(item: &EvalItem, ctx: &PipelineContext<'_>) -> SampleResult {
    match segment(&item.image, &item.sample.expression, &item.proposals, ctx) {
        Ok(outcome) => {
            let iou = crate::mask::mask_iou(&outcome.winner_mask, &item.sample.gt_mask)
                .unwrap_or(0.0);
            SampleResult {
                image_id: item.sample.image_id.clone(),
                iou,
                winner_index: Some(outcome.winner_index),
                error: None,
            }
        }
        Err(err) => SampleResult {
            image_id: item.sample.image_id.clone(),
            iou: 0.0,
            winner_index: None,
            error: Some(err.to_string()),
        },
    }
}

fn sample_counts(item: &EvalItem, result: &SampleResult, ctx: &PipelineContext<'_>) -> (u64, u64) {
    // integer intersection/union counts; failures count an empty prediction
    if let Some(w) = result.winner_index {
        if let Some(p) = item.proposals.proposals.get(w) {
            if let Ok((i, u)) = intersection_union(&p.mask, &item.sample.gt_mask) {
                return (i as u64, u as u64);
            }
        }
    }
    let _ = ctx;
    (0, item.sample.gt_mask.area() as u64)
}

/// Evaluate a dataset. Sample-level failures are recorded with IoU 0 and an
/// error note rather than aborting the run. Results are identical for any
/// worker count: per-sample work is independent and aggregation uses exact
/// integer pixel counts in dataset order.
pub fn evaluate(
    items: &[EvalItem],
    ctx: &PipelineContext<'_>,
    config_snapshot: serde_json::Value,
    workers: usize,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let workers = workers.max(1);
    let results: Vec<SampleResult> = if workers == 1 {
        items.iter().map(|item| evaluate_one(item, ctx)).collect()
    } else {
        // stride partition: worker w owns indices i with i % workers == w;
        // merging by index keeps the result order independent of scheduling
        let mut merged: Vec<Option<SampleResult>> = vec![None; items.len()];
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut local = Vec::new();
                        let mut i = w;
                        while i < items.len() {
                            local.push((i, evaluate_one(&items[i], ctx)));
                            i += workers;
                        }
                        local
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("worker panicked") {
                    merged[i] = Some(r);
                }
            }
        });
        merged.into_iter().map(|s| s.expect("slot filled")).collect()
    };

    let mut inter_total: u64 = 0;
    let mut union_total: u64 = 0;
    let mut iou_sum = 0.0;
    for (item, result) in items.iter().zip(&results) {
        let (i, u) = sample_counts(item, result, ctx);
        inter_total += i;
        union_total += u;
        iou_sum += result.iou;
    }
    let oiou = if union_total == 0 {
        0.0
    } else {
        inter_total as f64 / union_total as f64
    };
    let miou = iou_sum / results.len() as f64;
    Ok(EvalReport {
        oiou,
        miou,
        per_sample: results,
        config: config_snapshot,
        ablation: ctx.ablation,
    })
}

/// Winner mask alpha-blended over the image.
pub fn render_overlay(image: &ImageData, winner: &BinaryMask) -> ImageData {
    blend_mask(image, winner, [255, 60, 60], 0.45)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::toy::{ToyEncoder, ToyEncoderConfig};
    use crate::guidance::GuidanceConfig;
    use crate::proposals::{canonicalize, ProposalGenConfig, RawProposal};
    use crate::scenes::generate_scenes;

    fn toy_ctx(enc: &ToyEncoder) -> PipelineContext<'_> {
        PipelineContext {
            visual: enc,
            text: enc,
            localizer: Some(enc),
            hybrid: HybridConfig {
                fusion_start_layer: 3,
                ..HybridConfig::default()
            },
            guidance: GuidanceConfig::default(),
            ablation: AblationFlags::default(),
            coherence_fallback_ones: false,
        }
    }

    #[test]
    fn zero_proposals_is_a_structured_error() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        let ctx = toy_ctx(&enc);
        let image = ImageData::filled(64, 64, [20, 20, 20]);
        let proposals = ProposalSet {
            image_id: "empty".into(),
            height: 64,
            width: 64,
            proposals: vec![],
        };
        let err = segment(&image, "the red circle", &proposals, &ctx);
        assert!(matches!(err, Err(Error::NoProposals { .. })));
    }

    #[test]
    fn single_proposal_wins_regardless_of_scores() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        let ctx = toy_ctx(&enc);
        let (scene, sample, _) = generate_scenes(1, 5).remove(0);
        let only = RawProposal {
            mask: scene.masks[0].clone(),
            predicted_iou: 0.9,
            stability_score: 0.9,
        };
        let proposals = ProposalSet {
            image_id: sample.image_id.clone(),
            height: 64,
            width: 64,
            proposals: canonicalize(vec![only], &ProposalGenConfig::default()),
        };
        let outcome = segment(&scene.image, &sample.expression, &proposals, &ctx).unwrap();
        assert_eq!(outcome.winner_index, 0);
    }

    #[test]
    fn evaluate_metrics_worked_example() {
        // two samples with intersections (2, 0) and unions (4, 4):
        // oIoU = 2/8, mIoU = (0.5 + 0) / 2
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        let ctx = toy_ctx(&enc);

        let image = ImageData::filled(8, 8, [220, 50, 50]);
        let pred = BinaryMask::from_fn(8, 8, |x, y| x < 3 && y == 0);
        let gt_a = BinaryMask::from_fn(8, 8, |x, y| x >= 1 && x < 4 && y == 0);
        let gt_b = BinaryMask::from_fn(8, 8, |x, y| x == 7 && y == 7);

        let mk_item = |id: &str, gt: &BinaryMask| EvalItem {
            sample: Sample {
                image_id: id.into(),
                image_path: None,
                expression: "red".into(),
                gt_mask: gt.clone(),
            },
            image: image.clone(),
            proposals: ProposalSet {
                image_id: id.into(),
                height: 8,
                width: 8,
                proposals: canonicalize(
                    vec![RawProposal {
                        mask: pred.clone(),
                        predicted_iou: 0.9,
                        stability_score: 0.9,
                    }],
                    &ProposalGenConfig::default(),
                ),
            },
        };
        // intersection(pred, gt_a) = 2, union = 4; intersection(pred, gt_b) = 0, union = 4
        let items = vec![mk_item("a", &gt_a), mk_item("b", &gt_b)];
        let report = evaluate(&items, &ctx, serde_json::json!({}), 1).unwrap();
        assert!((report.oiou - 0.25).abs() < 1e-12);
        assert!((report.miou - 0.25).abs() < 1e-12);
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        let ctx = toy_ctx(&enc);
        let items: Vec<EvalItem> = generate_scenes(4, 23)
            .into_iter()
            .map(|(scene, sample, _)| {
                let gt = sample.gt_mask.clone();
                EvalItem {
                    sample,
                    image: scene.image,
                    proposals: ProposalSet {
                        image_id: "x".into(),
                        height: 64,
                        width: 64,
                        proposals: canonicalize(
                            vec![RawProposal {
                                mask: gt,
                                predicted_iou: 0.9,
                                stability_score: 0.9,
                            }],
                            &ProposalGenConfig::default(),
                        ),
                    },
                }
            })
            .collect();
        let report = evaluate(&items, &ctx, serde_json::json!({}), 1).unwrap();
        assert_eq!(report.oiou, 1.0);
        assert_eq!(report.miou, 1.0);
    }

    #[test]
    fn failed_samples_score_zero_and_do_not_abort() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        let ctx = toy_ctx(&enc);
        let (scene, sample, proposals) = generate_scenes(1, 31).remove(0);
        let ok_item = EvalItem {
            sample: sample.clone(),
            image: scene.image.clone(),
            proposals,
        };
        let bad_item = EvalItem {
            sample: Sample {
                image_id: "bad".into(),
                image_path: None,
                expression: sample.expression.clone(),
                gt_mask: sample.gt_mask.clone(),
            },
            image: scene.image.clone(),
            proposals: ProposalSet {
                image_id: "bad".into(),
                height: 64,
                width: 64,
                proposals: vec![],
            },
        };
        let report = evaluate(&[ok_item, bad_item], &ctx, serde_json::json!({}), 1).unwrap();
        assert_eq!(report.per_sample.len(), 2);
        assert_eq!(report.per_sample[1].iou, 0.0);
        assert!(report.per_sample[1].error.is_some());
    }

    #[test]
    fn report_is_invariant_under_dataset_permutation_and_workers() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        let ctx = toy_ctx(&enc);
        let items: Vec<EvalItem> = generate_scenes(6, 41)
            .into_iter()
            .map(|(scene, sample, proposals)| EvalItem {
                sample,
                image: scene.image,
                proposals,
            })
            .collect();
        let forward = evaluate(&items, &ctx, serde_json::json!({}), 1).unwrap();
        let w4 = evaluate(&items, &ctx, serde_json::json!({}), 4).unwrap();
        assert_eq!(forward.oiou, w4.oiou);
        assert_eq!(forward.miou, w4.miou);
        for (a, b) in forward.per_sample.iter().zip(&w4.per_sample) {
            assert_eq!(a.iou, b.iou);
            assert_eq!(a.winner_index, b.winner_index);
        }
        let mut rev: Vec<EvalItem> = items.into_iter().rev().collect();
        let backward = evaluate(&rev, &ctx, serde_json::json!({}), 1).unwrap();
        assert_eq!(forward.oiou, backward.oiou);
        assert_eq!(forward.miou, backward.miou);
        rev.reverse();
    }

    #[test]
    fn winner_is_invariant_under_proposal_permutation() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
        let ctx = toy_ctx(&enc);
        let (scene, sample, proposals) = generate_scenes(1, 47).remove(0);
        let outcome_a = segment(&scene.image, &sample.expression, &proposals, &ctx).unwrap();

        // re-ingest the same masks in reverse order; canonical ordering
        // restores identical indices
        let mut raws: Vec<RawProposal> = proposals
            .proposals
            .iter()
            .map(|p| RawProposal {
                mask: p.mask.clone(),
                predicted_iou: p.predicted_iou,
                stability_score: p.stability_score,
            })
            .collect();
        raws.reverse();
        let permuted = ProposalSet {
            image_id: proposals.image_id.clone(),
            height: proposals.height,
            width: proposals.width,
            proposals: canonicalize(raws, &ProposalGenConfig::default()),
        };
        let outcome_b = segment(&scene.image, &sample.expression, &permuted, &ctx).unwrap();
        assert_eq!(outcome_a.winner_index, outcome_b.winner_index);
        assert_eq!(outcome_a.winner_mask, outcome_b.winner_mask);
    }
}
