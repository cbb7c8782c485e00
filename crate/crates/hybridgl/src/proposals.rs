//! Mask-proposal ingestion: cache files, optional live providers, quality
//! filtering, exact-duplicate removal, and the deterministic canonical order
//! (area-descending, ties broken by RLE lexicographic order).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::ImageData;
use crate::mask::{rle_decode, rle_encode, BinaryMask, Rle};

/// A scored candidate mask, before canonical indexing.
#[derive(Debug, Clone)]
pub struct RawProposal {
    pub mask: BinaryMask,
    pub predicted_iou: f64,
    pub stability_score: f64,
}

/// A filtered, deterministically indexed candidate mask.
#[derive(Debug, Clone)]
pub struct MaskProposal {
    pub mask: BinaryMask,
    pub predicted_iou: f64,
    pub stability_score: f64,
    pub index: usize,
}

/// Quality gates and generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalGenConfig {
    pub predicted_iou_threshold: f64,
    pub stability_score_threshold: f64,
    pub points_per_side: usize,
}

impl Default for ProposalGenConfig {
    fn default() -> Self {
        Self {
            predicted_iou_threshold: 0.7,
            stability_score_threshold: 0.7,
            points_per_side: 8,
        }
    }
}

/// The ordered proposal list for one image.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub proposals: Vec<MaskProposal>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Live proposal generator. Providers are used by at most one worker at a
/// time; the built-in [`GridRegionProvider`] is a deterministic stand-in for
/// an external foundation-model adapter.
pub trait ProposalProvider {
    fn generate(&self, image: &ImageData, config: &ProposalGenConfig) -> Result<Vec<RawProposal>>;
}

/// Where proposals for an image come from.
pub enum ProposalSource<'a> {
    CachePath(PathBuf),
    Provider(&'a dyn ProposalProvider),
}

/// Quality gates (inclusive thresholds) plus the non-empty-mask gate.
fn passes(raw: &RawProposal, config: &ProposalGenConfig) -> bool {
    raw.predicted_iou >= config.predicted_iou_threshold
        && raw.stability_score >= config.stability_score_threshold
        && !raw.mask.is_empty()
}

/// Filter, deduplicate, and order raw proposals into their canonical form.
///
/// Duplicates (identical RLE) keep the higher predicted IoU (then the higher
/// stability score). Ordering is area-descending with RLE-lexicographic
/// tie-breaks, so re-ingesting the same proposals yields identical indices.
pub fn canonicalize(raws: Vec<RawProposal>, config: &ProposalGenConfig) -> Vec<MaskProposal> {
    let mut best: BTreeMap<Rle, RawProposal> = BTreeMap::new();
    for raw in raws {
        if !passes(&raw, config) {
            continue;
        }
        let key = rle_encode(&raw.mask);
        match best.get(&key) {
            Some(existing)
                if (existing.predicted_iou, existing.stability_score)
                    >= (raw.predicted_iou, raw.stability_score) => {}
            _ => {
                best.insert(key, raw);
            }
        }
    }
    let mut keyed: Vec<(usize, Rle, RawProposal)> = best
        .into_iter()
        .map(|(rle, raw)| (raw.mask.area(), rle, raw))
        .collect();
    keyed.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    keyed
        .into_iter()
        .enumerate()
        .map(|(index, (_, _, raw))| MaskProposal {
            mask: raw.mask,
            predicted_iou: raw.predicted_iou,
            stability_score: raw.stability_score,
            index,
        })
        .collect()
}

/// Re-filter and re-order an existing proposal list. Idempotent.
pub fn filter(proposals: Vec<MaskProposal>, config: &ProposalGenConfig) -> Vec<MaskProposal> {
    canonicalize(
        proposals
            .into_iter()
            .map(|p| RawProposal {
                mask: p.mask,
                predicted_iou: p.predicted_iou,
                stability_score: p.stability_score,
            })
            .collect(),
        config,
    )
}

/// Per-image proposal cache: `<image_id>.proposals.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProposalCacheFile {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub proposals: Vec<CachedProposal>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CachedProposal {
    pub rle: Rle,
    pub predicted_iou: f64,
    pub stability_score: f64,
}

pub fn write_cache(
    path: impl AsRef<Path>,
    image_id: &str,
    height: usize,
    width: usize,
    raws: &[RawProposal],
) -> Result<()> {
    let file = ProposalCacheFile {
        image_id: image_id.to_string(),
        height,
        width,
        proposals: raws
            .iter()
            .map(|r| CachedProposal {
                rle: rle_encode(&r.mask),
                predicted_iou: r.predicted_iou,
                stability_score: r.stability_score,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<(String, usize, usize, Vec<RawProposal>)> {
    let data = std::fs::read_to_string(path)?;
    let file: ProposalCacheFile = serde_json::from_str(&data)?;
    let mut raws = Vec::with_capacity(file.proposals.len());
    for cached in file.proposals {
        let mask = rle_decode(&cached.rle)?;
        raws.push(RawProposal {
            mask,
            predicted_iou: cached.predicted_iou,
            stability_score: cached.stability_score,
        });
    }
    Ok((file.image_id, file.height, file.width, raws))
}

/// Ingestion contract: read a cache file or invoke a live provider, then
/// apply filters and canonical ordering. Cached and live paths agree because
/// filters are re-applied on read.
pub fn load_or_generate(
    image: &ImageData,
    image_id: &str,
    source: ProposalSource<'_>,
    config: &ProposalGenConfig,
) -> Result<ProposalSet> {
    let raws = match source {
        ProposalSource::CachePath(path) => {
            if !path.exists() {
                return Err(Error::MissingProposalSource {
                    image_id: image_id.to_string(),
                });
            }
            let (_, _, _, raws) = read_cache(&path)?;
            raws
        }
        ProposalSource::Provider(provider) => provider.generate(image, config)?,
    };
    for (i, raw) in raws.iter().enumerate() {
        if raw.mask.shape() != image.shape() {
            return Err(Error::ProposalShapeMismatch {
                image_id: image_id.to_string(),
                index: i,
                mask_h: raw.mask.height(),
                mask_w: raw.mask.width(),
                image_h: image.height(),
                image_w: image.width(),
            });
        }
    }
    Ok(ProposalSet {
        image_id: image_id.to_string(),
        height: image.height(),
        width: image.width(),
        proposals: canonicalize(raws, config),
    })
}

/// Deterministic region provider: seeds a points-per-side grid and grows
/// flat-color regions by flood fill. Quality scores come from region
/// roundness and erosion stability, so clean shapes pass the default 0.7
/// gates while speckle does not. A foundation-model adapter can replace this
/// behind the same trait.
pub struct GridRegionProvider {
    /// Max RGB distance to the seed color for a pixel to join the region.
    pub color_tolerance: f64,
}

impl Default for GridRegionProvider {
    fn default() -> Self {
        Self {
            color_tolerance: 60.0,
        }
    }
}

impl ProposalProvider for GridRegionProvider {
    fn generate(&self, image: &ImageData, config: &ProposalGenConfig) -> Result<Vec<RawProposal>> {
        let (h, w) = image.shape();
        let pps = config.points_per_side.max(1);
        let mut raws = Vec::new();
        for sy in 0..pps {
            for sx in 0..pps {
                let x = ((sx as f64 + 0.5) * w as f64 / pps as f64) as usize;
                let y = ((sy as f64 + 0.5) * h as f64 / pps as f64) as usize;
                let mask = flood_fill(image, x.min(w - 1), y.min(h - 1), self.color_tolerance);
                let area = mask.area();
                if area < 4 || area == h * w {
                    continue;
                }
                let (perimeter, interior) = boundary_stats(&mask);
                let roundness =
                    (4.0 * std::f64::consts::PI * area as f64) / (perimeter * perimeter).max(1.0);
                let predicted_iou = (0.5 + 0.5 * roundness.min(1.0)).min(0.99);
                let stability_score = (0.5 + 0.5 * interior as f64 / area as f64).min(0.99);
                raws.push(RawProposal {
                    mask,
                    predicted_iou,
                    stability_score,
                });
            }
        }
        Ok(raws)
    }
}

fn flood_fill(image: &ImageData, seed_x: usize, seed_y: usize, tolerance: f64) -> BinaryMask {
    let (h, w) = image.shape();
    let seed = image.get(seed_x, seed_y);
    let close = |rgb: [u8; 3]| -> bool {
        let d2: f64 = (0..3)
            .map(|c| {
                let d = rgb[c] as f64 - seed[c] as f64;
                d * d
            })
            .sum();
        d2.sqrt() <= tolerance
    };
    let mut mask = BinaryMask::new(h, w);
    let mut stack = vec![(seed_x, seed_y)];
    while let Some((x, y)) = stack.pop() {
        if mask.get(x, y) || !close(image.get(x, y)) {
            continue;
        }
        mask.set(x, y, true);
        if x > 0 {
            stack.push((x - 1, y));
        }
        if x + 1 < w {
            stack.push((x + 1, y));
        }
        if y > 0 {
            stack.push((x, y - 1));
        }
        if y + 1 < h {
            stack.push((x, y + 1));
        }
    }
    mask
}

/// (boundary pixel count, fully interior pixel count) of a mask.
fn boundary_stats(mask: &BinaryMask) -> (f64, usize) {
    let (h, w) = mask.shape();
    let mut perimeter = 0usize;
    let mut interior = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !mask.get(x - 1, y)
                || !mask.get(x + 1, y)
                || !mask.get(x, y - 1)
                || !mask.get(x, y + 1);
            if edge {
                perimeter += 1;
            } else {
                interior += 1;
            }
        }
    }
    (perimeter as f64, interior)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw(mask: BinaryMask, iou: f64, stab: f64) -> RawProposal {
        RawProposal {
            mask,
            predicted_iou: iou,
            stability_score: stab,
        }
    }

    fn block(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y))
    }

    #[test]
    fn below_threshold_predicted_iou_is_excluded() {
        let cfg = ProposalGenConfig::default();
        let kept = canonicalize(vec![raw(block(8, 8, 0, 0, 4, 4), 0.65, 0.9)], &cfg);
        assert!(kept.is_empty());
    }

    #[test]
    fn one_failing_gate_excludes() {
        let cfg = ProposalGenConfig::default();
        let kept = canonicalize(vec![raw(block(8, 8, 0, 0, 4, 4), 0.9, 0.5)], &cfg);
        assert!(kept.is_empty());
    }

    #[test]
    fn thresholds_are_inclusive() {
        let cfg = ProposalGenConfig::default();
        let kept = canonicalize(vec![raw(block(8, 8, 0, 0, 4, 4), 0.7, 0.7)], &cfg);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn empty_masks_are_rejected() {
        let cfg = ProposalGenConfig::default();
        let kept = canonicalize(vec![raw(BinaryMask::new(8, 8), 0.9, 0.9)], &cfg);
        assert!(kept.is_empty());
    }

    #[test]
    fn duplicates_keep_higher_predicted_iou() {
        let cfg = ProposalGenConfig::default();
        let m = block(8, 8, 1, 1, 5, 5);
        let kept = canonicalize(
            vec![raw(m.clone(), 0.8, 0.9), raw(m.clone(), 0.95, 0.85)],
            &cfg,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].predicted_iou, 0.95);
    }

    #[test]
    fn ordering_is_area_descending_then_rle_lex() {
        let cfg = ProposalGenConfig::default();
        let big = block(8, 8, 0, 0, 6, 6);
        let small_a = block(8, 8, 0, 0, 2, 2);
        let small_b = block(8, 8, 4, 4, 6, 6);
        let kept = canonicalize(
            vec![
                raw(small_b.clone(), 0.9, 0.9),
                raw(big.clone(), 0.9, 0.9),
                raw(small_a.clone(), 0.9, 0.9),
            ],
            &cfg,
        );
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].mask, big);
        // same area: RLE of the top-left block sorts before the bottom-right
        assert_eq!(kept[1].mask, small_a);
        assert_eq!(kept[2].mask, small_b);
        assert_eq!(
            kept.iter().map(|p| p.index).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn cache_roundtrip_reproduces_exact_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img01.proposals.json");
        let image = ImageData::filled(8, 8, [10, 10, 10]);
        let raws = vec![
            raw(block(8, 8, 0, 0, 4, 4), 0.9, 0.9),
            raw(block(8, 8, 2, 2, 7, 7), 0.85, 0.8),
        ];
        write_cache(&path, "img01", 8, 8, &raws).unwrap();
        let cfg = ProposalGenConfig::default();
        let a = load_or_generate(&image, "img01", ProposalSource::CachePath(path.clone()), &cfg)
            .unwrap();
        let b =
            load_or_generate(&image, "img01", ProposalSource::CachePath(path), &cfg).unwrap();
        assert_eq!(a.len(), 2);
        for (pa, pb) in a.proposals.iter().zip(&b.proposals) {
            assert_eq!(pa.mask, pb.mask);
            assert_eq!(pa.index, pb.index);
        }
    }

    #[test]
    fn empty_cache_yields_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img02.proposals.json");
        write_cache(&path, "img02", 8, 8, &[]).unwrap();
        let image = ImageData::filled(8, 8, [10, 10, 10]);
        let set = load_or_generate(
            &image,
            "img02",
            ProposalSource::CachePath(path),
            &ProposalGenConfig::default(),
        )
        .unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn missing_cache_without_provider_errors() {
        let image = ImageData::filled(8, 8, [10, 10, 10]);
        let err = load_or_generate(
            &image,
            "zzz",
            ProposalSource::CachePath(PathBuf::from("/nonexistent/zzz.proposals.json")),
            &ProposalGenConfig::default(),
        );
        assert!(matches!(err, Err(Error::MissingProposalSource { .. })));
    }

    #[test]
    fn shape_mismatch_names_the_proposal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img03.proposals.json");
        write_cache(&path, "img03", 4, 4, &[raw(block(4, 4, 0, 0, 2, 2), 0.9, 0.9)]).unwrap();
        let image = ImageData::filled(8, 8, [10, 10, 10]);
        let err = load_or_generate(
            &image,
            "img03",
            ProposalSource::CachePath(path),
            &ProposalGenConfig::default(),
        );
        match err {
            Err(Error::ProposalShapeMismatch { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn grid_provider_finds_flat_regions() {
        let mut image = ImageData::filled(32, 32, [20, 20, 20]);
        for y in 4..16 {
            for x in 4..16 {
                image.set(x, y, [220, 50, 50]);
            }
        }
        let provider = GridRegionProvider::default();
        let set = load_or_generate(
            &image,
            "img04",
            ProposalSource::Provider(&provider),
            &ProposalGenConfig::default(),
        )
        .unwrap();
        assert!(
            set.proposals
                .iter()
                .any(|p| p.mask.area() == 144 && p.mask.get(5, 5)),
            "should propose the 12x12 red block"
        );
    }

    proptest! {
        #[test]
        fn prop_filter_is_idempotent_and_order_independent(
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = ProposalGenConfig::default();
            let mut raws = Vec::new();
            for _ in 0..6 {
                let x0 = rng.gen_range(0..6);
                let y0 = rng.gen_range(0..6);
                let x1 = rng.gen_range(x0 + 1..=8);
                let y1 = rng.gen_range(y0 + 1..=8);
                raws.push(raw(
                    block(8, 8, x0, y0, x1, y1),
                    rng.gen_range(0.5..1.0),
                    rng.gen_range(0.5..1.0),
                ));
            }
            let once = canonicalize(raws.clone(), &cfg);
            let twice = filter(once.clone(), &cfg);
            prop_assert_eq!(once.len(), twice.len());
            for (a, b) in once.iter().zip(&twice) {
                prop_assert_eq!(&a.mask, &b.mask);
                prop_assert_eq!(a.index, b.index);
            }
            let mut reversed = raws;
            reversed.reverse();
            let rev = canonicalize(reversed, &cfg);
            prop_assert_eq!(once.len(), rev.len());
            for (a, b) in once.iter().zip(&rev) {
                prop_assert_eq!(&a.mask, &b.mask);
            }
        }
    }
}
