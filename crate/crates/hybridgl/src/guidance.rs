//! Spatial guidance: the binary relation function, relational semantic
//! scores, coherence and position guidance maps, the spatial guidance score,
//! and the final fused score table.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoder::{cosine, FeatureVector, TextEncoder};
use crate::error::{Error, Result};
use crate::imgproc::ImageData;
use crate::mask::{bbox_and_center, BinaryMask};
use crate::parse::{ParsedExpression, PositionCue, RelationType, SizeCue};
use crate::proposals::{MaskProposal, ProposalSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    Coherence,
    Position,
    Combined,
}

/// An H×W real-valued map in [0, 1] encoding spatial evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub kind: GuidanceKind,
}

impl GuidanceMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, kind: GuidanceKind) -> Self {
        assert_eq!(values.len(), height * width);
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            height,
            width,
            values,
            kind,
        }
    }

    pub fn ones(height: usize, width: usize, kind: GuidanceKind) -> Self {
        Self {
            height,
            width,
            values: vec![1.0; height * width],
            kind,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Guidance-stage knobs. `lambda` switches to `lambda_big`/`lambda_small`
/// when the expression carries a size cue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_big: f64,
    pub lambda_small: f64,
    pub top_k: usize,
    pub within_containment: f64,
    pub softmax_temperature: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            lambda: 9.0,
            lambda_big: 3.0,
            lambda_small: 14.0,
            top_k: 5,
            within_containment: 0.9,
            softmax_temperature: 1.0,
        }
    }
}

impl GuidanceConfig {
    pub fn lambda_for(&self, size_cue: SizeCue) -> f64 {
        match size_cue {
            SizeCue::None => self.lambda,
            SizeCue::Big => self.lambda_big,
            SizeCue::Small => self.lambda_small,
        }
    }
}

/// Text-conditioned localization backend; the guidance module upsamples and
/// normalizes whatever resolution the provider returns.
pub trait LocalizationProvider {
    fn locate(&self, image: &ImageData, text: &str) -> Result<Array2<f64>>;
}

/// Binary spatial relation test on mask geometry: directional relations
/// compare bounding-box centers, `within` tests containment of the subject,
/// size relations compare areas strictly.
pub fn relation_holds(
    rel: RelationType,
    subject: &MaskProposal,
    anchor: &MaskProposal,
    within_containment: f64,
) -> Result<bool> {
    let (_, (sx, sy)) = bbox_and_center(&subject.mask)?;
    let (_, (ax, ay)) = bbox_and_center(&anchor.mask)?;
    Ok(match rel {
        RelationType::Left => sx < ax,
        RelationType::Right => sx > ax,
        RelationType::Top => sy < ay,
        RelationType::Bottom => sy > ay,
        RelationType::Within => {
            let (inter, _) = crate::mask::intersection_union(&subject.mask, &anchor.mask)?;
            inter as f64 / subject.mask.area() as f64 >= within_containment
        }
        RelationType::Smaller => subject.mask.area() < anchor.mask.area(),
        RelationType::Bigger => subject.mask.area() > anchor.mask.area(),
    })
}

/// Softmax with max-subtraction at the given temperature.
pub fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-proposal probabilities for one phrase: cosine scores restricted to the
/// top-k proposals and softmax-normalized there; everything else gets 0.
fn phrase_probabilities(
    phrase: &str,
    features: &[FeatureVector],
    text_encoder: &dyn TextEncoder,
    config: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let emb = text_encoder.encode_text(phrase)?;
    let raw: Vec<f64> = features
        .iter()
        .map(|f| cosine(f, &emb))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).unwrap().then(a.cmp(&b)));
    let k = config.top_k.max(1).min(raw.len());
    let top = &order[..k];
    let top_scores: Vec<f64> = top.iter().map(|&i| raw[i]).collect();
    let probs = softmax(&top_scores, config.softmax_temperature);
    let mut out = vec![0.0; raw.len()];
    for (&i, &p) in top.iter().zip(&probs) {
        out[i] = p;
    }
    Ok(out)
}

/// Relational semantic scores: for each parsed relation, the head and anchor
/// phrase probabilities are combined through the binary relation function and
/// summed over anchors (and over multiple relations). All-zero output means
/// no pair satisfied any relation; callers fall back to plain cosine scores.
pub fn relational_semantic_scores(
    proposals: &ProposalSet,
    parsed: &ParsedExpression,
    features: &[FeatureVector],
    text_encoder: &dyn TextEncoder,
    config: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let n = proposals.len();
    if n == 0 {
        return Err(Error::NoProposals {
            image_id: proposals.image_id.clone(),
        });
    }
    if parsed.relations.is_empty() {
        return Err(Error::Config(
            "relational scoring requires at least one parsed relation".into(),
        ));
    }
    debug_assert_eq!(features.len(), n);

    let p_head = phrase_probabilities(&parsed.head_phrase, features, text_encoder, config)?;
    let mut scores = vec![0.0; n];
    for entry in &parsed.relations {
        let p_anchor = phrase_probabilities(&entry.anchor, features, text_encoder, config)?;
        for i in 0..n {
            if p_head[i] == 0.0 {
                continue;
            }
            let mut anchor_term = 0.0;
            for j in 0..n {
                if i == j || p_anchor[j] == 0.0 {
                    continue;
                }
                if relation_holds(
                    entry.relation,
                    &proposals.proposals[i],
                    &proposals.proposals[j],
                    config.within_containment,
                )? {
                    anchor_term += p_anchor[j];
                }
            }
            scores[i] += p_head[i] * anchor_term;
        }
    }
    Ok(scores)
}

/// Bilinear upsampling with corner alignment, so provider grid nodes land
/// exactly on the corresponding output pixels when sizes divide evenly.
fn upsample_bilinear(map: &Array2<f64>, height: usize, width: usize) -> Vec<f64> {
    let (mh, mw) = map.dim();
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let gy = if height <= 1 || mh <= 1 {
            0.0
        } else {
            y as f64 * (mh - 1) as f64 / (height - 1) as f64
        };
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(mh - 1);
        let fy = gy - y0 as f64;
        for x in 0..width {
            let gx = if width <= 1 || mw <= 1 {
                0.0
            } else {
                x as f64 * (mw - 1) as f64 / (width - 1) as f64
            };
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(mw - 1);
            let fx = gx - x0 as f64;
            let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
            let bot = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
            out[y * width + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Min-max normalize into [0, 1]; a constant map becomes all 0.5.
fn minmax_normalize(values: &mut [f64]) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max - min < 1e-12 {
        for v in values.iter_mut() {
            *v = 0.5;
        }
    } else {
        for v in values.iter_mut() {
            *v = (*v - min) / (max - min);
        }
    }
}

/// Coherence guidance: provider similarity map, upsampled to the image size
/// and min-max normalized.
pub fn coherence_map(
    image: &ImageData,
    text: &str,
    provider: &dyn LocalizationProvider,
) -> Result<GuidanceMap> {
    let raw = provider.locate(image, text)?;
    let mut values = upsample_bilinear(&raw, image.height(), image.width());
    minmax_normalize(&mut values);
    Ok(GuidanceMap::new(
        image.height(),
        image.width(),
        values,
        GuidanceKind::Coherence,
    ))
}

/// Positional guidance: linear gradients toward the named region, all-ones
/// when no cue is present.
pub fn position_map(pos: Option<PositionCue>, height: usize, width: usize) -> GuidanceMap {
    let value = |x: usize, y: usize| -> f64 {
        let fx = if width > 1 {
            x as f64 / (width - 1) as f64
        } else {
            0.0
        };
        let fy = if height > 1 {
            y as f64 / (height - 1) as f64
        } else {
            0.0
        };
        match pos {
            None => 1.0,
            Some(PositionCue::Left) => {
                if width > 1 {
                    1.0 - fx
                } else {
                    1.0
                }
            }
            Some(PositionCue::Right) => {
                if width > 1 {
                    fx
                } else {
                    1.0
                }
            }
            Some(PositionCue::Top) => {
                if height > 1 {
                    1.0 - fy
                } else {
                    1.0
                }
            }
            Some(PositionCue::Bottom) => {
                if height > 1 {
                    fy
                } else {
                    1.0
                }
            }
            Some(PositionCue::Middle) => {
                // Chebyshev distance to the image center, normalized
                let cx = (width - 1) as f64 / 2.0;
                let cy = (height - 1) as f64 / 2.0;
                let dx = if width > 1 { (x as f64 - cx).abs() / cx } else { 0.0 };
                let dy = if height > 1 { (y as f64 - cy).abs() / cy } else { 0.0 };
                1.0 - dx.max(dy)
            }
        }
    };
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            values.push(value(x, y));
        }
    }
    GuidanceMap::new(height, width, values, GuidanceKind::Position)
}

/// Element-wise product of the coherence map with every cued position map.
pub fn compose_guidance(coherence: &GuidanceMap, cues: &BTreeSet<PositionCue>) -> GuidanceMap {
    let (h, w) = coherence.shape();
    let mut values = coherence.values().to_vec();
    for &cue in cues {
        let pos = position_map(Some(cue), h, w);
        for (v, p) in values.iter_mut().zip(pos.values()) {
            *v *= p;
        }
    }
    GuidanceMap::new(h, w, values, GuidanceKind::Combined)
}

/// Mean guidance inside the mask minus lambda times the mean outside. The
/// second term is zero when the complement is empty.
pub fn spatial_score(guidance: &GuidanceMap, mask: &BinaryMask, lambda: f64) -> f64 {
    assert_eq!(guidance.shape(), mask.shape(), "guidance/mask shape mismatch");
    let (h, w) = mask.shape();
    let mut sum_in = 0.0;
    let mut n_in = 0usize;
    let mut sum_out = 0.0;
    let mut n_out = 0usize;
    for y in 0..h {
        for x in 0..w {
            let g = guidance.get(x, y);
            if mask.get(x, y) {
                sum_in += g;
                n_in += 1;
            } else {
                sum_out += g;
                n_out += 1;
            }
        }
    }
    let inside = if n_in > 0 { sum_in / n_in as f64 } else { 0.0 };
    let outside = if n_out > 0 { sum_out / n_out as f64 } else { 0.0 };
    inside - lambda * outside
}

/// One proposal's row in the score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub index: usize,
    pub semantic_raw: f64,
    pub semantic_norm: f64,
    pub spatial_raw: f64,
    pub spatial_norm: f64,
    pub final_score: f64,
}

/// Per-proposal semantic, spatial, and fused scores with a deterministic
/// argmax winner (ties keep the lowest proposal index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
    pub winner_index: usize,
}

/// Softmax-normalize both score lists independently and fuse them as
/// `(1 - alpha) * semantic + alpha * spatial`.
pub fn fuse_scores(
    semantic: &[f64],
    spatial: &[f64],
    alpha: f64,
    temperature: f64,
) -> Result<ScoreTable> {
    if semantic.len() != spatial.len() {
        return Err(Error::ScoreLengthMismatch {
            left: semantic.len(),
            right: spatial.len(),
        });
    }
    if semantic.is_empty() {
        return Err(Error::EmptyScores);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let semantic_norm = softmax(semantic, temperature);
    let spatial_norm = softmax(spatial, temperature);
    let mut rows = Vec::with_capacity(semantic.len());
    let mut winner_index = 0usize;
    let mut best = f64::NEG_INFINITY;
    for i in 0..semantic.len() {
        let final_score = (1.0 - alpha) * semantic_norm[i] + alpha * spatial_norm[i];
        if final_score > best {
            best = final_score;
            winner_index = i;
        }
        rows.push(ScoreRow {
            index: i,
            semantic_raw: semantic[i],
            semantic_norm: semantic_norm[i],
            spatial_raw: spatial[i],
            spatial_norm: spatial_norm[i],
            final_score,
        });
    }
    Ok(ScoreTable { rows, winner_index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::rle_encode;
    use std::collections::HashMap;

    fn prop_from(mask: BinaryMask, index: usize) -> MaskProposal {
        MaskProposal {
            mask,
            predicted_iou: 0.9,
            stability_score: 0.9,
            index,
        }
    }

    fn block(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
    }

    struct FixedTextEncoder(HashMap<String, FeatureVector>);

    impl TextEncoder for FixedTextEncoder {
        fn encode_text(&self, text: &str) -> Result<FeatureVector> {
            self.0
                .get(text)
                .cloned()
                .ok_or_else(|| Error::Config(format!("no fixture for `{text}`")))
        }
    }

    #[test]
    fn relation_holds_directional_geometry() {
        let a = prop_from(block(32, 64, 5, 10, 15, 20), 0);
        let b = prop_from(block(32, 64, 45, 10, 55, 20), 1);
        let t = 0.9;
        assert!(relation_holds(RelationType::Left, &a, &b, t).unwrap());
        assert!(!relation_holds(RelationType::Right, &a, &b, t).unwrap());
        assert!(relation_holds(RelationType::Right, &b, &a, t).unwrap());
    }

    #[test]
    fn relation_holds_within_containment() {
        let inner = prop_from(block(32, 32, 10, 10, 14, 14), 0);
        let outer = prop_from(block(32, 32, 5, 5, 20, 20), 1);
        assert!(relation_holds(RelationType::Within, &inner, &outer, 0.9).unwrap());
        assert!(!relation_holds(RelationType::Within, &outer, &inner, 0.9).unwrap());
    }

    #[test]
    fn relation_holds_size_strictness() {
        let small = prop_from(block(32, 32, 0, 0, 4, 4), 0);
        let big = prop_from(block(32, 32, 8, 8, 20, 20), 1);
        assert!(relation_holds(RelationType::Smaller, &small, &big, 0.9).unwrap());
        assert!(!relation_holds(RelationType::Smaller, &big, &small, 0.9).unwrap());
        assert!(relation_holds(RelationType::Bigger, &big, &small, 0.9).unwrap());
        // equal areas: neither smaller nor bigger
        let same = prop_from(block(32, 32, 20, 20, 24, 24), 2);
        assert!(!relation_holds(RelationType::Smaller, &small, &same, 0.9).unwrap());
        assert!(!relation_holds(RelationType::Bigger, &small, &same, 0.9).unwrap());
    }

    #[test]
    fn relational_scores_worked_example() {
        // two proposals, P(p) = (0.6, 0.4), P(q) = (0.3, 0.7),
        // R holds only for (m1, m2) -> scores (0.6 * 0.7, 0)
        let left = block(16, 32, 2, 4, 8, 12);
        let right = block(16, 32, 20, 4, 26, 12);
        let proposals = ProposalSet {
            image_id: "t".into(),
            height: 16,
            width: 32,
            proposals: vec![prop_from(left, 0), prop_from(right, 1)],
        };
        // features chosen so softmax(cos) gives the stated probabilities
        let f0 = FeatureVector {
            values: vec![1.0, 0.0],
        };
        let f1 = FeatureVector {
            values: vec![0.0, 1.0],
        };
        let dp = (0.6f64 / 0.4).ln(); // cosine gap giving softmax (0.6, 0.4)
        let dq = (0.7f64 / 0.3).ln();
        let text = FixedTextEncoder(HashMap::from([
            ("the circle".to_string(), unit_at_cosines(dp)),
            ("the square".to_string(), unit_at_cosines(-dq)),
        ]));
        let parsed = crate::parse::parse_expression("the circle on the left of the square").unwrap();
        assert_eq!(parsed.head_phrase, "the circle");
        assert_eq!(parsed.relations[0].anchor, "the square");
        let cfg = GuidanceConfig::default();
        let scores = relational_semantic_scores(
            &proposals,
            &parsed,
            &[f0, f1],
            &text,
            &cfg,
        )
        .unwrap();
        assert!((scores[0] - 0.6 * 0.7).abs() < 1e-9, "got {scores:?}");
        assert_eq!(scores[1], 0.0);
    }

    /// Unit vector t in the plane with cos(e0, t) - cos(e1, t) = gap.
    fn unit_at_cosines(gap: f64) -> FeatureVector {
        // t = (cos a, sin a); cos(e0,t) = cos a, cos(e1,t) = sin a
        // cos a - sin a = gap  =>  sqrt(2) cos(a + pi/4) = gap
        let a = (gap / 2.0f64.sqrt()).acos() - std::f64::consts::FRAC_PI_4;
        FeatureVector {
            values: vec![a.cos(), a.sin()],
        }
    }

    #[test]
    fn relational_scores_all_zero_when_no_pair_satisfies() {
        let top = block(32, 16, 4, 2, 12, 8);
        let bottom = block(32, 16, 4, 20, 12, 28);
        let proposals = ProposalSet {
            image_id: "t".into(),
            height: 32,
            width: 16,
            proposals: vec![prop_from(top, 0), prop_from(bottom, 1)],
        };
        let f0 = FeatureVector { values: vec![1.0, 0.0] };
        let f1 = FeatureVector { values: vec![0.0, 1.0] };
        let text = FixedTextEncoder(HashMap::from([
            ("the dot".to_string(), unit_at_cosines(0.2)),
            ("the blob".to_string(), unit_at_cosines(-0.2)),
        ]));
        // left relation, but the two proposals share the same center x
        let parsed = crate::parse::parse_expression("the dot on the left of the blob").unwrap();
        let scores =
            relational_semantic_scores(&proposals, &parsed, &[f0, f1], &text, &GuidanceConfig::default())
                .unwrap();
        assert_eq!(scores, vec![0.0, 0.0]);
    }

    struct ConstantProvider(f64);

    impl LocalizationProvider for ConstantProvider {
        fn locate(&self, _image: &ImageData, _text: &str) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((4, 4), self.0))
        }
    }

    struct MapProvider(Array2<f64>);

    impl LocalizationProvider for MapProvider {
        fn locate(&self, _image: &ImageData, _text: &str) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn coherence_constant_provider_gives_half() {
        let img = ImageData::filled(16, 16, [0, 0, 0]);
        let g = coherence_map(&img, "x", &ConstantProvider(0.37)).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn coherence_gt_heatmap_peaks_inside_object() {
        let img = ImageData::filled(16, 16, [0, 0, 0]);
        let mut heat = Array2::zeros((16, 16));
        for y in 4..8 {
            for x in 4..8 {
                heat[[y, x]] = 2.0;
            }
        }
        let g = coherence_map(&img, "x", &MapProvider(heat)).unwrap();
        assert_eq!(g.get(5, 5), 1.0);
        assert_eq!(g.get(0, 0), 0.0);
    }

    #[test]
    fn coherence_nodes_match_provider_values_exactly() {
        // 4x4 grid upsampled to 64x64: corner-aligned nodes at pixel stride 21
        let img = ImageData::filled(64, 64, [0, 0, 0]);
        let mut grid = Array2::zeros((4, 4));
        for y in 0..4 {
            for x in 0..4 {
                grid[[y, x]] = (y * 4 + x) as f64;
            }
        }
        let g = coherence_map(&img, "x", &MapProvider(grid.clone())).unwrap();
        let lo = 0.0;
        let hi = 15.0;
        for gy in 0..4 {
            for gx in 0..4 {
                let px = gx * 21;
                let py = gy * 21;
                let expect = (grid[[gy, gx]] - lo) / (hi - lo);
                assert!(
                    (g.get(px, py) - expect).abs() < 1e-12,
                    "node ({gx},{gy}) at pixel ({px},{py})"
                );
            }
        }
    }

    #[test]
    fn position_no_cue_is_all_ones() {
        let g = position_map(None, 8, 8);
        assert!(g.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn position_left_gradient_endpoints() {
        let g = position_map(Some(PositionCue::Left), 4, 8);
        assert_eq!(g.get(0, 0), 1.0);
        assert_eq!(g.get(7, 3), 0.0);
        let r = position_map(Some(PositionCue::Right), 4, 8);
        assert_eq!(r.get(0, 0), 0.0);
        assert_eq!(r.get(7, 0), 1.0);
    }

    #[test]
    fn position_middle_unique_max_on_odd_size() {
        let g = position_map(Some(PositionCue::Middle), 9, 9);
        let mut max_pos = (0, 0);
        let mut max_val = -1.0;
        let mut max_count = 0;
        for y in 0..9 {
            for x in 0..9 {
                let v = g.get(x, y);
                if v > max_val {
                    max_val = v;
                    max_pos = (x, y);
                    max_count = 1;
                } else if v == max_val {
                    max_count += 1;
                }
            }
        }
        assert_eq!(max_val, 1.0);
        assert_eq!(max_pos, (4, 4));
        assert_eq!(max_count, 1);
    }

    #[test]
    fn position_degenerate_single_column() {
        let g = position_map(Some(PositionCue::Left), 4, 1);
        assert!(g.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn compose_empty_cues_is_coherence() {
        let co = GuidanceMap::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect(), GuidanceKind::Coherence);
        let g = compose_guidance(&co, &BTreeSet::new());
        assert_eq!(g.values(), co.values());
    }

    #[test]
    fn compose_ones_coherence_with_left_is_left_gradient() {
        let co = GuidanceMap::ones(4, 8, GuidanceKind::Coherence);
        let g = compose_guidance(&co, &BTreeSet::from([PositionCue::Left]));
        let left = position_map(Some(PositionCue::Left), 4, 8);
        assert_eq!(g.values(), left.values());
    }

    #[test]
    fn compose_left_top_pointwise_oracle() {
        let h = 6;
        let w = 10;
        let co = GuidanceMap::new(
            h,
            w,
            (0..h * w).map(|i| (i % 7) as f64 / 6.0).collect(),
            GuidanceKind::Coherence,
        );
        let g = compose_guidance(&co, &BTreeSet::from([PositionCue::Left, PositionCue::Top]));
        for y in 0..h {
            for x in 0..w {
                let expect = co.get(x, y)
                    * (1.0 - x as f64 / (w - 1) as f64)
                    * (1.0 - y as f64 / (h - 1) as f64);
                assert!((g.get(x, y) - expect).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&g.get(x, y)));
            }
        }
    }

    #[test]
    fn spatial_score_constant_guidance() {
        let g = GuidanceMap::ones(8, 8, GuidanceKind::Combined);
        let m = block(8, 8, 0, 0, 4, 4);
        assert_eq!(spatial_score(&g, &m, 9.0), 1.0 - 9.0);
    }

    #[test]
    fn spatial_score_indicator_guidance() {
        let m = block(8, 8, 2, 2, 6, 6);
        let vals: Vec<f64> = (0..64)
            .map(|i| if m.get(i % 8, i / 8) { 1.0 } else { 0.0 })
            .collect();
        let g = GuidanceMap::new(8, 8, vals, GuidanceKind::Combined);
        assert_eq!(spatial_score(&g, &m, 123.0), 1.0);
    }

    #[test]
    fn spatial_score_full_mask_drops_second_term() {
        let g = GuidanceMap::ones(4, 4, GuidanceKind::Combined);
        let m = block(4, 4, 0, 0, 4, 4);
        assert_eq!(spatial_score(&g, &m, 9.0), 1.0);
    }

    #[test]
    fn fuse_worked_example_alpha_0_6() {
        // raw scores chosen so softmax yields exactly (0.7, 0.3) and (0.2, 0.8)
        let semantic = vec![0.7f64.ln(), 0.3f64.ln()];
        let spatial = vec![0.2f64.ln(), 0.8f64.ln()];
        let table = fuse_scores(&semantic, &spatial, 0.6, 1.0).unwrap();
        assert!((table.rows[0].semantic_norm - 0.7).abs() < 1e-12);
        assert!((table.rows[1].spatial_norm - 0.8).abs() < 1e-12);
        assert!((table.rows[0].final_score - 0.40).abs() < 1e-12);
        assert!((table.rows[1].final_score - 0.60).abs() < 1e-12);
        assert_eq!(table.winner_index, 1);
    }

    #[test]
    fn fuse_degenerate_alphas_match_raw_argmax() {
        let semantic = vec![0.2, 0.9, 0.5];
        let spatial = vec![0.8, 0.1, 0.3];
        let t0 = fuse_scores(&semantic, &spatial, 0.0, 1.0).unwrap();
        assert_eq!(t0.winner_index, 1);
        let t1 = fuse_scores(&semantic, &spatial, 1.0, 1.0).unwrap();
        assert_eq!(t1.winner_index, 0);
    }

    #[test]
    fn fuse_norm_columns_sum_to_one() {
        let semantic = vec![0.3, -1.2, 4.0, 0.0];
        let spatial = vec![-8.0, 1.0, 0.5, 2.2];
        let table = fuse_scores(&semantic, &spatial, 0.6, 1.0).unwrap();
        let ssum: f64 = table.rows.iter().map(|r| r.semantic_norm).sum();
        let gsum: f64 = table.rows.iter().map(|r| r.spatial_norm).sum();
        assert!((ssum - 1.0).abs() < 1e-9);
        assert!((gsum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fuse_tie_break_keeps_lowest_index() {
        let semantic = vec![0.5, 0.5];
        let spatial = vec![0.5, 0.5];
        let table = fuse_scores(&semantic, &spatial, 0.6, 1.0).unwrap();
        assert_eq!(table.winner_index, 0);
    }

    #[test]
    fn fuse_length_mismatch_errors() {
        assert!(fuse_scores(&[1.0], &[1.0, 2.0], 0.5, 1.0).is_err());
        assert!(fuse_scores(&[], &[], 0.5, 1.0).is_err());
    }

    /// Duplicate-mask pair guard used by the canonical ordering, exercised
    /// here at the RLE level.
    #[test]
    fn identical_masks_have_equal_rle() {
        let a = block(8, 8, 1, 1, 4, 4);
        let b = block(8, 8, 1, 1, 4, 4);
        assert_eq!(rle_encode(&a), rle_encode(&b));
    }
}
