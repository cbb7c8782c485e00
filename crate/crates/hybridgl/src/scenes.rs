//! Synthetic scene generator: small images of colored shapes with
//! auto-generated referring expressions whose correct target is known by
//! construction. Gives the pipeline a desk-scale ground truth, including
//! distractor proposals (shape unions, partial crops) that force the
//! guidance stage to do real work.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::toy::PALETTE;
use crate::error::Result;
use crate::imgproc::ImageData;
use crate::mask::{rle_encode, BinaryMask};
use crate::parse::PositionCue;
use crate::pipeline::Sample;
use crate::proposals::{canonicalize, ProposalGenConfig, ProposalSet, RawProposal};

pub const SCENE_SIDE: usize = 64;
const BACKGROUND: [u8; 3] = [25, 25, 28];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

const SHAPE_KINDS: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
/// Palette indices used for scene shapes (distinct, saturated colors).
const SCENE_COLORS: [usize; 6] = [0, 1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Position,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub color_index: usize,
    pub cx: isize,
    pub cy: isize,
    pub radius: isize,
}

impl SceneShape {
    pub fn color_word(&self) -> &'static str {
        PALETTE[self.color_index].0
    }

    pub fn appearance(&self) -> (usize, ShapeKind) {
        (self.color_index, self.kind)
    }

    pub fn mask(&self, side: usize) -> BinaryMask {
        let r = self.radius;
        BinaryMask::from_fn(side, side, |x, y| {
            let dx = x as isize - self.cx;
            let dy = y as isize - self.cy;
            match self.kind {
                ShapeKind::Circle => dx * dx + dy * dy <= r * r,
                ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
                ShapeKind::Triangle => {
                    // right triangle: legs on the left and bottom, 45-degree
                    // hypotenuse from (cx-r, cy-r) to (cx+r, cy+r)
                    dx.abs() <= r && dy.abs() <= r && dy >= dx
                }
            }
        })
    }
}

/// A generated image, its shapes, the expression, and the known target.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub image: ImageData,
    pub shapes: Vec<SceneShape>,
    pub masks: Vec<BinaryMask>,
    pub expression: String,
    pub target_index: usize,
    pub kind: SceneKind,
}

fn render(shapes: &[SceneShape], side: usize) -> (ImageData, Vec<BinaryMask>) {
    let mut image = ImageData::filled(side, side, BACKGROUND);
    let mut masks = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let mask = shape.mask(side);
        let color = PALETTE[shape.color_index].1;
        for y in 0..side {
            for x in 0..side {
                if mask.get(x, y) {
                    image.set(x, y, color);
                }
            }
        }
        masks.push(mask);
    }
    (image, masks)
}

fn shapes_overlap(a: &SceneShape, b: &SceneShape) -> bool {
    let dx = (a.cx - b.cx).abs();
    let dy = (a.cy - b.cy).abs();
    let min_gap = a.radius + b.radius + 5;
    dx < min_gap && dy < min_gap
}

#[derive(Clone, Copy)]
enum Radius {
    Fixed(isize),
    Range(isize, isize),
}

fn place_far_from(
    rng: &mut ChaCha8Rng,
    placed: &[SceneShape],
    kind: ShapeKind,
    color_index: usize,
    radius: Radius,
) -> Option<SceneShape> {
    let side = SCENE_SIDE as isize;
    for _ in 0..60 {
        let radius = match radius {
            Radius::Fixed(r) => r,
            Radius::Range(lo, hi) => rng.gen_range(lo..=hi),
        };
        let cx = rng.gen_range(radius + 2..side - radius - 2);
        let cy = rng.gen_range(radius + 2..side - radius - 2);
        let candidate = SceneShape {
            kind,
            color_index,
            cx,
            cy,
            radius,
        };
        if placed.iter().all(|s| !shapes_overlap(s, &candidate)) {
            return Some(candidate);
        }
    }
    None
}

/// Cue axis coordinate: lower values satisfy left/top, higher right/bottom.
fn axis_value(shape: &SceneShape, cue: PositionCue) -> isize {
    match cue {
        PositionCue::Left | PositionCue::Right => shape.cx,
        PositionCue::Top | PositionCue::Bottom => shape.cy,
        PositionCue::Middle => 0,
    }
}

fn cue_wants_low(cue: PositionCue) -> bool {
    matches!(cue, PositionCue::Left | PositionCue::Top)
}

const POSITION_CUES: [PositionCue; 4] = [
    PositionCue::Left,
    PositionCue::Right,
    PositionCue::Top,
    PositionCue::Bottom,
];

fn relation_phrase(cue: PositionCue) -> &'static str {
    match cue {
        PositionCue::Left => "to the left of",
        PositionCue::Right => "on the right of",
        PositionCue::Top => "above",
        PositionCue::Bottom => "below",
        PositionCue::Middle => unreachable!("middle is never a relation"),
    }
}

fn cue_word(cue: PositionCue) -> &'static str {
    match cue {
        PositionCue::Left => "left",
        PositionCue::Right => "right",
        PositionCue::Top => "top",
        PositionCue::Bottom => "bottom",
        PositionCue::Middle => "middle",
    }
}

/// Minimum separation along the cue axis between the target and its twin.
const AXIS_MARGIN: isize = 16;

fn try_position_scene(rng: &mut ChaCha8Rng) -> Option<(Vec<SceneShape>, String, usize, SceneKind)> {
    let kind = SHAPE_KINDS[rng.gen_range(0..SHAPE_KINDS.len())];
    let color = SCENE_COLORS[rng.gen_range(0..SCENE_COLORS.len())];
    let cue = POSITION_CUES[rng.gen_range(0..POSITION_CUES.len())];

    let mut shapes = Vec::new();
    let first = place_far_from(rng, &shapes, kind, color, Radius::Range(10, 12))?;
    shapes.push(first);
    // the twin shares the target's exact size so spatial scoring cannot
    // separate the pair by anything but position
    let mut twin = None;
    for _ in 0..60 {
        if let Some(candidate) = place_far_from(rng, &shapes, kind, color, Radius::Fixed(first.radius)) {
            if (axis_value(&candidate, cue) - axis_value(&first, cue)).abs() >= AXIS_MARGIN {
                twin = Some(candidate);
                break;
            }
        }
    }
    let twin = twin?;
    shapes.push(twin);

    // a third shape in a different color; union distractors are built from
    // it so they never contain only expression-mentioned objects
    let d_kind = SHAPE_KINDS[(SHAPE_KINDS.iter().position(|&k| k == kind).unwrap()
        + 1
        + rng.gen_range(0..2))
        % 3];
    let d_color = SCENE_COLORS[(color + 1 + rng.gen_range(0..SCENE_COLORS.len() - 1))
        % SCENE_COLORS.len()];
    let extra = place_far_from(rng, &shapes, d_kind, d_color, Radius::Range(8, 10))?;
    shapes.push(extra);

    let target_index = {
        let a = axis_value(&shapes[0], cue);
        let b = axis_value(&shapes[1], cue);
        if cue_wants_low(cue) == (a < b) {
            0
        } else {
            1
        }
    };
    let color_word = PALETTE[color].0;
    let expression = format!(
        "the {} {} on the {}",
        color_word,
        kind.word(),
        cue_word(cue)
    );
    Some((shapes, expression, target_index, SceneKind::Position))
}

fn try_relation_scene(rng: &mut ChaCha8Rng) -> Option<(Vec<SceneShape>, String, usize, SceneKind)> {
    let t_kind = SHAPE_KINDS[rng.gen_range(0..SHAPE_KINDS.len())];
    let t_color = SCENE_COLORS[rng.gen_range(0..SCENE_COLORS.len())];
    // anchor appearance must differ in both color and kind so phrase
    // embeddings separate cleanly
    let a_kind = SHAPE_KINDS[(SHAPE_KINDS.iter().position(|&k| k == t_kind).unwrap()
        + 1
        + rng.gen_range(0..2))
        % 3];
    let a_color = SCENE_COLORS[(t_color + 1 + rng.gen_range(0..SCENE_COLORS.len() - 1))
        % SCENE_COLORS.len()];
    let rel = POSITION_CUES[rng.gen_range(0..POSITION_CUES.len())];

    let mut shapes = Vec::new();
    let anchor = place_far_from(rng, &shapes, a_kind, a_color, Radius::Range(9, 10))?;
    shapes.push(anchor);

    // target satisfies the relation, the decoy sits strictly on the other side
    let mut target = None;
    for _ in 0..80 {
        if let Some(c) = place_far_from(rng, &shapes, t_kind, t_color, Radius::Range(9, 10)) {
            let delta = axis_value(&c, rel) - axis_value(&anchor, rel);
            let ok = if cue_wants_low(rel) {
                delta <= -AXIS_MARGIN
            } else {
                delta >= AXIS_MARGIN
            };
            if ok {
                target = Some(c);
                break;
            }
        }
    }
    let target = target?;
    shapes.push(target);

    let mut decoy = None;
    for _ in 0..80 {
        if let Some(c) = place_far_from(rng, &shapes, t_kind, t_color, Radius::Fixed(target.radius)) {
            let delta = axis_value(&c, rel) - axis_value(&anchor, rel);
            let ok = if cue_wants_low(rel) {
                delta >= AXIS_MARGIN
            } else {
                delta <= -AXIS_MARGIN
            };
            if ok {
                decoy = Some(c);
                break;
            }
        }
    }
    let decoy = decoy?;
    shapes.push(decoy);

    // an unmentioned extra shape, host for the union distractor; its color
    // must differ from both mentioned colors because coherence keys on color
    let e_color = *SCENE_COLORS
        .iter()
        .cycle()
        .skip(rng.gen_range(0..SCENE_COLORS.len()))
        .find(|&&c| c != t_color && c != a_color)
        .expect("palette has more than two colors");
    let e_kind = SHAPE_KINDS[rng.gen_range(0..SHAPE_KINDS.len())];
    let extra = place_far_from(rng, &shapes, e_kind, e_color, Radius::Range(8, 9))?;
    shapes.push(extra);

    let expression = format!(
        "the {} {} {} the {} {}",
        PALETTE[t_color].0,
        t_kind.word(),
        relation_phrase(rel),
        PALETTE[a_color].0,
        a_kind.word()
    );
    Some((shapes, expression, 1, SceneKind::Relation))
}

/// Crop a mask to roughly half its area: split at the area median along the
/// chosen axis and keep one side.
fn half_crop(mask: &BinaryMask, keep_low: bool, vertical: bool) -> BinaryMask {
    let (h, w) = mask.shape();
    let len = if vertical { w } else { h };
    let mut counts = vec![0usize; len];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                counts[if vertical { x } else { y }] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let mut acc = 0usize;
    let mut median = 0usize;
    for (i, c) in counts.iter().enumerate() {
        acc += c;
        if acc * 2 >= total {
            median = i;
            break;
        }
    }
    BinaryMask::from_fn(h, w, |x, y| {
        if !mask.get(x, y) {
            return false;
        }
        let coord = if vertical { x } else { y };
        if keep_low {
            coord <= median
        } else {
            coord > median
        }
    })
}

/// Proposal quality scores: exact shapes clear the gates comfortably,
/// distractors clear them less comfortably, junk fails them.
const EXACT_SCORES: (f64, f64) = (0.95, 0.92);
const UNION_SCORES: (f64, f64) = (0.82, 0.80);
const CROP_SCORES: (f64, f64) = (0.78, 0.76);
const JUNK_SCORES: (f64, f64) = (0.50, 0.90);

fn build_proposals(
    scene: &SyntheticScene,
    rng: &mut ChaCha8Rng,
    image_id: &str,
) -> ProposalSet {
    let side = SCENE_SIDE;
    let mut raws = Vec::new();
    for mask in &scene.masks {
        raws.push(RawProposal {
            mask: mask.clone(),
            predicted_iou: EXACT_SCORES.0,
            stability_score: EXACT_SCORES.1,
        });
    }

    // union distractor: the target's twin/decoy joined with the unmentioned
    // extra shape, so the union never covers only expression-mentioned
    // objects (which spatial scoring would otherwise reward)
    let (ua, ub) = match scene.kind {
        SceneKind::Position => (if scene.target_index == 0 { 1 } else { 0 }, 2),
        SceneKind::Relation => (2, 3),
    };
    let union = scene.masks[ua].union(&scene.masks[ub]).expect("same shape");
    raws.push(RawProposal {
        mask: union,
        predicted_iou: UNION_SCORES.0,
        stability_score: UNION_SCORES.1,
    });

    // partial crop of the target
    let crop = half_crop(
        &scene.masks[scene.target_index],
        rng.gen_bool(0.5),
        rng.gen_bool(0.5),
    );
    if !crop.is_empty() {
        raws.push(RawProposal {
            mask: crop,
            predicted_iou: CROP_SCORES.0,
            stability_score: CROP_SCORES.1,
        });
    }

    // a junk proposal that the quality filter must drop
    let jx = rng.gen_range(0..side - 8);
    let jy = rng.gen_range(0..side - 8);
    raws.push(RawProposal {
        mask: BinaryMask::from_fn(side, side, |x, y| {
            (jx..jx + 8).contains(&x) && (jy..jy + 8).contains(&y)
        }),
        predicted_iou: JUNK_SCORES.0,
        stability_score: JUNK_SCORES.1,
    });

    ProposalSet {
        image_id: image_id.to_string(),
        height: side,
        width: side,
        proposals: canonicalize(raws, &ProposalGenConfig::default()),
    }
}

/// Generate `count` scenes deterministically from a seed. Scene kinds
/// alternate between position-cue and relation scenes.
pub fn generate_scenes(count: usize, seed: u64) -> Vec<(SyntheticScene, Sample, ProposalSet)> {
    assert!(count >= 1, "need at least one scene");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut produced = 0usize;
    while produced < count {
        let want_position = produced % 2 == 0;
        let attempt = if want_position {
            try_position_scene(&mut rng)
        } else {
            try_relation_scene(&mut rng)
        };
        let Some((shapes, expression, target_index, kind)) = attempt else {
            continue;
        };
        let (image, masks) = render(&shapes, SCENE_SIDE);
        let scene = SyntheticScene {
            image: image.clone(),
            shapes,
            masks,
            expression: expression.clone(),
            target_index,
            kind,
        };
        let image_id = format!("scene_{produced:04}");
        let proposals = build_proposals(&scene, &mut rng, &image_id);
        let sample = Sample {
            image_id,
            image_path: None,
            expression,
            gt_mask: scene.masks[scene.target_index].clone(),
        };
        out.push((scene, sample, proposals));
        produced += 1;
    }
    out
}

/// JSONL record for one dataset sample.
#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub image_path: String,
    pub expression: String,
    pub gt_rle: crate::mask::Rle,
}

/// Write scenes to disk: `images/*.png`, `proposals/*.proposals.json`, and
/// `dataset.jsonl` with paths relative to `dir`.
pub fn write_scenes(
    dir: impl AsRef<Path>,
    scenes: &[(SyntheticScene, Sample, ProposalSet)],
) -> Result<()> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let proposals_dir = dir.join("proposals");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&proposals_dir)?;
    let mut jsonl = String::new();
    for (scene, sample, proposals) in scenes {
        let png_rel = format!("images/{}.png", sample.image_id);
        scene.image.write_png(dir.join(&png_rel))?;
        let raws: Vec<RawProposal> = proposals
            .proposals
            .iter()
            .map(|p| RawProposal {
                mask: p.mask.clone(),
                predicted_iou: p.predicted_iou,
                stability_score: p.stability_score,
            })
            .collect();
        crate::proposals::write_cache(
            proposals_dir.join(format!("{}.proposals.json", sample.image_id)),
            &sample.image_id,
            proposals.height,
            proposals.width,
            &raws,
        )?;
        let record = DatasetRecord {
            image_id: sample.image_id.clone(),
            image_path: png_rel,
            expression: sample.expression.clone(),
            gt_rle: rle_encode(&sample.gt_mask),
        };
        jsonl.push_str(&serde_json::to_string(&record)?);
        jsonl.push('\n');
    }
    std::fs::write(dir.join("dataset.jsonl"), jsonl)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::rle_encode;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scenes(6, 7);
        let b = generate_scenes(6, 7);
        assert_eq!(a.len(), b.len());
        for ((sa, _, pa), (sb, _, pb)) in a.iter().zip(&b) {
            assert_eq!(sa.image, sb.image);
            assert_eq!(sa.expression, sb.expression);
            assert_eq!(sa.target_index, sb.target_index);
            assert_eq!(pa.len(), pb.len());
            for (x, y) in pa.proposals.iter().zip(&pb.proposals) {
                assert_eq!(x.mask, y.mask);
            }
        }
    }

    #[test]
    fn exactly_one_shape_satisfies_the_expression() {
        for (scene, _, _) in generate_scenes(20, 11) {
            match scene.kind {
                SceneKind::Position => {
                    let target = &scene.shapes[scene.target_index];
                    let same: Vec<&SceneShape> = scene
                        .shapes
                        .iter()
                        .filter(|s| s.appearance() == target.appearance())
                        .collect();
                    assert_eq!(same.len(), 2, "position scenes have an appearance twin");
                }
                SceneKind::Relation => {
                    let target = &scene.shapes[scene.target_index];
                    let same: Vec<&SceneShape> = scene
                        .shapes
                        .iter()
                        .filter(|s| s.appearance() == target.appearance())
                        .collect();
                    assert_eq!(same.len(), 2, "relation scenes have a decoy");
                }
            }
        }
    }

    #[test]
    fn distractor_proposals_never_equal_ground_truth() {
        for (scene, sample, proposals) in generate_scenes(20, 13) {
            let gt_rle = rle_encode(&sample.gt_mask);
            let shape_rles: Vec<_> = scene.masks.iter().map(rle_encode).collect();
            for p in &proposals.proposals {
                let rle = rle_encode(&p.mask);
                if !shape_rles.contains(&rle) {
                    assert_ne!(rle, gt_rle, "distractor equals the ground truth mask");
                }
            }
        }
    }

    #[test]
    fn junk_proposals_are_filtered_out() {
        for (_, _, proposals) in generate_scenes(8, 17) {
            for p in &proposals.proposals {
                assert!(p.predicted_iou >= 0.7);
                assert!(p.stability_score >= 0.7);
            }
        }
    }

    #[test]
    fn scene_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_scenes(3, 19);
        write_scenes(dir.path(), &scenes).unwrap();
        let jsonl = std::fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 3);
        for line in jsonl.lines() {
            let rec: DatasetRecord = serde_json::from_str(line).unwrap();
            assert!(dir.path().join(&rec.image_path).exists());
            assert!(dir
                .path()
                .join("proposals")
                .join(format!("{}.proposals.json", rec.image_id))
                .exists());
        }
    }
}
