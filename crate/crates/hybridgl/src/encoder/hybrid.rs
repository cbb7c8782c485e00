//! Dual-branch hybrid forward pass: masked local branch, blurred and
//! attention-masked global branch, progressive cross-branch token fusion.

use crate::error::{Error, Result};
use crate::imgproc::ImageData;
use crate::mask::{bbox_and_center, BinaryMask};

use super::{
    cosine, FeatureStrategy, FeatureVector, HybridConfig, LayeredEncoder, LayeredEncoderSpec,
    TokenMask, TokenSequence,
};

/// Local-branch input: pixels outside the mask zeroed, no cropping.
pub fn preprocess_local(image: &ImageData, mask: &BinaryMask) -> ImageData {
    assert_eq!(image.shape(), mask.shape(), "image/mask shape mismatch");
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !mask.get(x, y) {
                out.set(x, y, [0, 0, 0]);
            }
        }
    }
    out
}

/// Global-branch input: Gaussian blur composited outside the mask only;
/// inside pixels are bit-identical to the input.
pub fn preprocess_global(image: &ImageData, mask: &BinaryMask, sigma: f64) -> ImageData {
    assert_eq!(image.shape(), mask.shape(), "image/mask shape mismatch");
    let blurred = image.gaussian_blur(sigma);
    let mut out = blurred;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) {
                out.set(x, y, image.get(x, y));
            }
        }
    }
    out
}

/// Project a pixel mask onto the encoder's token grid.
///
/// A token is inside when its grid cell's mean coverage is at least 0.5.
/// If that leaves every token outside, any positive coverage counts; if the
/// mask vanished entirely under resizing, the single token containing the
/// original mask's bbox center is used. The result is never all-false for a
/// non-empty mask.
pub fn token_mask_of(mask: &BinaryMask, spec: &LayeredEncoderSpec) -> Result<TokenMask> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let side = spec.input_side;
    let resized = mask.resize_nearest(side, side);
    let cell = spec.cell_side();
    let grid = spec.grid_side;
    let cell_area = (cell * cell) as f64;

    let coverage: Vec<f64> = (0..grid * grid)
        .map(|p| {
            let (gy, gx) = (p / grid, p % grid);
            let mut covered = 0usize;
            for y in gy * cell..(gy + 1) * cell {
                for x in gx * cell..(gx + 1) * cell {
                    covered += resized.get(x, y) as usize;
                }
            }
            covered as f64 / cell_area
        })
        .collect();

    let mut bits: Vec<bool> = coverage.iter().map(|&c| c >= 0.5).collect();
    if !bits.iter().any(|&b| b) {
        bits = coverage.iter().map(|&c| c > 0.0).collect();
    }
    if !bits.iter().any(|&b| b) {
        let (_, (cx, cy)) = bbox_and_center(mask)?;
        let gx = ((cx * side as f64 / mask.width() as f64) as usize / cell).min(grid - 1);
        let gy = ((cy * side as f64 / mask.height() as f64) as usize / cell).min(grid - 1);
        bits[gy * grid + gx] = true;
    }
    Ok(TokenMask::new(bits))
}

fn check_finite(seq: &TokenSequence, layer: usize) -> Result<()> {
    if !seq.is_finite() {
        return Err(Error::NonFiniteActivation { layer });
    }
    Ok(())
}

/// Add `beta`-scaled global image-token rows (where the token mask is true)
/// into the local sequence. CLS rows are never fused.
fn fuse_tokens(local: &mut TokenSequence, global: &TokenSequence, tmask: &TokenMask, beta: f64) {
    for (t, &inside) in tmask.bits().iter().enumerate() {
        if inside {
            let g = global.tokens.row(1 + t).to_owned();
            let mut row = local.tokens.row_mut(1 + t);
            row += &(&g * beta);
        }
    }
}

struct BranchInputs {
    local: ImageData,
    global: ImageData,
    tmask: TokenMask,
}

fn prepare_inputs(
    image: &ImageData,
    mask: &BinaryMask,
    spec: &LayeredEncoderSpec,
    config: &HybridConfig,
    tmask_override: Option<&TokenMask>,
) -> Result<BranchInputs> {
    if image.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            expected_h: image.height(),
            expected_w: image.width(),
            got_h: mask.height(),
            got_w: mask.width(),
        });
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let side = spec.input_side;
    let image_r = image.resize_bilinear(side, side);
    let mask_r = mask.resize_nearest(side, side);
    let tmask = match tmask_override {
        Some(t) => t.clone(),
        None => token_mask_of(mask, spec)?,
    };
    let sigma = config.blur_sigma_for(side);
    Ok(BranchInputs {
        local: preprocess_local(&image_r, &mask_r),
        global: preprocess_global(&image_r, &mask_r, sigma),
        tmask,
    })
}

/// G2L hybrid encoding (the default strategy).
pub fn hybrid_encode(
    image: &ImageData,
    mask: &BinaryMask,
    encoder: &dyn LayeredEncoder,
    config: &HybridConfig,
) -> Result<FeatureVector> {
    encode_g2l(image, mask, encoder, config, None)
}

/// G2L with a forced token mask; test hook for the degeneracy checks.
pub fn hybrid_encode_with_token_mask(
    image: &ImageData,
    mask: &BinaryMask,
    encoder: &dyn LayeredEncoder,
    config: &HybridConfig,
    tmask: &TokenMask,
) -> Result<FeatureVector> {
    encode_g2l(image, mask, encoder, config, Some(tmask))
}

fn encode_g2l(
    image: &ImageData,
    mask: &BinaryMask,
    encoder: &dyn LayeredEncoder,
    config: &HybridConfig,
    tmask_override: Option<&TokenMask>,
) -> Result<FeatureVector> {
    let spec = encoder.spec();
    config.validate(&spec)?;
    let inputs = prepare_inputs(image, mask, &spec, config, tmask_override)?;
    let amask = inputs.tmask.to_attention_mask(config.attention_start());

    let mut local = encoder.embed(&inputs.local);
    let mut global = encoder.embed(&inputs.global);
    let fuse_active = config.beta != 0.0 && inputs.tmask.any();

    for layer in 1..=spec.num_layers {
        if layer >= config.fusion_start_layer && fuse_active {
            fuse_tokens(&mut local, &global, &inputs.tmask, config.beta);
        }
        let next_local = encoder.run_layer(layer, &local, None)?;
        let next_global = encoder.run_layer(layer, &global, Some(&amask))?;
        check_finite(&next_local, layer)?;
        check_finite(&next_global, layer)?;
        local = next_local;
        global = next_global;
    }
    Ok(encoder.project_cls(&local))
}

fn encode_l2g(
    image: &ImageData,
    mask: &BinaryMask,
    encoder: &dyn LayeredEncoder,
    config: &HybridConfig,
) -> Result<FeatureVector> {
    let spec = encoder.spec();
    config.validate(&spec)?;
    let inputs = prepare_inputs(image, mask, &spec, config, None)?;
    let amask = inputs.tmask.to_attention_mask(config.attention_start());

    let mut local = encoder.embed(&inputs.local);
    let mut global = encoder.embed(&inputs.global);

    for layer in 1..=spec.num_layers {
        if layer >= config.fusion_start_layer && config.beta != 0.0 {
            // local tokens are already mask-restricted; no token mask needed
            for t in 0..inputs.tmask.len() {
                let l = local.tokens.row(1 + t).to_owned();
                let mut row = global.tokens.row_mut(1 + t);
                row += &(&l * config.beta);
            }
        }
        let next_local = encoder.run_layer(layer, &local, None)?;
        let next_global = encoder.run_layer(layer, &global, Some(&amask))?;
        check_finite(&next_local, layer)?;
        check_finite(&next_global, layer)?;
        local = next_local;
        global = next_global;
    }
    Ok(encoder.project_cls(&global))
}

fn encode_branch(
    image: &ImageData,
    mask: &BinaryMask,
    encoder: &dyn LayeredEncoder,
    config: &HybridConfig,
    global_branch: bool,
) -> Result<FeatureVector> {
    let spec = encoder.spec();
    config.validate(&spec)?;
    let inputs = prepare_inputs(image, mask, &spec, config, None)?;
    let amask = inputs.tmask.to_attention_mask(config.attention_start());

    let mut seq = encoder.embed(if global_branch {
        &inputs.global
    } else {
        &inputs.local
    });
    for layer in 1..=spec.num_layers {
        let mask_arg = if global_branch { Some(&amask) } else { None };
        seq = encoder.run_layer(layer, &seq, mask_arg)?;
        check_finite(&seq, layer)?;
    }
    Ok(encoder.project_cls(&seq))
}

/// Encode a mask under the configured fusion strategy.
pub fn encode_with_strategy(
    image: &ImageData,
    mask: &BinaryMask,
    encoder: &dyn LayeredEncoder,
    config: &HybridConfig,
) -> Result<FeatureVector> {
    match config.strategy {
        FeatureStrategy::G2l => hybrid_encode(image, mask, encoder, config),
        FeatureStrategy::L2g => encode_l2g(image, mask, encoder, config),
        FeatureStrategy::LocalOnly => encode_branch(image, mask, encoder, config, false),
        FeatureStrategy::GlobalOnly => encode_branch(image, mask, encoder, config, true),
        FeatureStrategy::GPlusL => {
            let local = encode_branch(image, mask, encoder, config, false)?;
            let global = encode_branch(image, mask, encoder, config, true)?;
            let w = config.gplusl_weight;
            let values = local
                .values
                .iter()
                .zip(&global.values)
                .map(|(l, g)| (1.0 - w) * l + w * g)
                .collect();
            Ok(FeatureVector { values })
        }
    }
}

/// Cosine of each mask feature against the text feature.
pub fn semantic_scores(
    features: &[FeatureVector],
    text_feature: &FeatureVector,
) -> Result<Vec<f64>> {
    features.iter().map(|f| cosine(f, text_feature)).collect()
}
