//! Deterministic toy encoder: a small pre-norm transformer over measurement
//! tokens, plus a matching text encoder sharing one seeded concept basis.
//!
//! Patch embeddings are hand-designed measurements (palette-color fractions,
//! lit fraction, axis/diagonal edge energy) rather than learned projections;
//! the transformer on top uses small seeded random weights so the residual
//! stream stays measurement-dominated while attention masking and fusion run
//! through real attention code. The projection head pools the final image
//! tokens, turns the recovered measurements into concept activations (colors
//! and shape-statistic matches), and maps them onto a seeded orthonormal
//! concept basis. Text encoding places vocabulary words on the same basis,
//! which is what makes cosine alignment between the two sides meaningful
//! without any training.

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::LocalizationProvider;
use crate::imgproc::ImageData;

use super::{
    AttentionMaskSpec, FeatureVector, LayeredEncoder, LayeredEncoderSpec, TextEncoder,
    TokenSequence,
};

/// Named palette shared by the toy encoder and the synthetic scene generator.
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [220, 50, 50]),
    ("green", [60, 170, 70]),
    ("blue", [60, 90, 220]),
    ("yellow", [230, 210, 50]),
    ("purple", [150, 60, 200]),
    ("orange", [235, 140, 40]),
    ("cyan", [60, 190, 200]),
    ("white", [240, 240, 240]),
];

/// Concept slot layout over the 16-dim descriptor/concept space.
const SLOT_LIT: usize = 8;
const SLOT_AXIS: usize = 9;
const SLOT_DIAG_POS: usize = 10;
const SLOT_CIRCLE: usize = 11;
const SLOT_SQUARE: usize = 12;
const SLOT_TRIANGLE: usize = 13;
const SLOT_DIAG_NEG: usize = 14;
const SLOT_BIAS: usize = 15;

const LIT_THRESHOLD: f64 = 0.08;
const BIAS_ACTIVATION: f64 = 0.02;
/// Edge statistics are sparse per patch; the gain lifts them well above the
/// transformer's residual drift so recovered ratios stay meaningful.
const EDGE_GAIN: f64 = 24.0;

/// Frozen shape prototypes, measured from canonical renders at the default
/// toy geometry. Both coordinates are ratios, so they are invariant to the
/// token scaling that branch fusion introduces:
/// `diag_share` = diagonal edge energy over total edge energy (staircase
/// rasterization keeps squares near 0, curved and slanted boundaries high);
/// `diag_balance` = |gx*gy>0 minus gx*gy<0 diagonal energy| over diagonal
/// energy (a single-hypotenuse triangle is one-signed, a circle balanced).
#[derive(Debug, Clone, Copy)]
struct ShapeProto {
    slot: usize,
    diag_share: f64,
    diag_balance: f64,
}

const SHAPE_PROTOS: [ShapeProto; 3] = [
    ShapeProto {
        slot: SLOT_CIRCLE,
        diag_share: 0.63,
        diag_balance: 0.18,
    },
    ShapeProto {
        slot: SLOT_SQUARE,
        diag_share: 0.19,
        diag_balance: 0.55,
    },
    ShapeProto {
        slot: SLOT_TRIANGLE,
        diag_share: 0.52,
        diag_balance: 0.93,
    },
];

/// Kernel widths chosen to cover the spread between the local-only and fused
/// paths across shape sizes and scene contexts: generous enough that every
/// variant of a shape saturates its own kernel, while cross-shape activations
/// stay several times smaller.
const DIAG_SD: f64 = 0.12;
const BALANCE_SD_CIRCLE: f64 = 0.25;
const BALANCE_SD_SQUARE: f64 = 0.30;
const BALANCE_SD_TRIANGLE: f64 = 0.15;

fn balance_sd(slot: usize) -> f64 {
    match slot {
        SLOT_SQUARE => BALANCE_SD_SQUARE,
        SLOT_TRIANGLE => BALANCE_SD_TRIANGLE,
        _ => BALANCE_SD_CIRCLE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub grid: usize,
    pub input_side: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 16,
            grid: 4,
            input_side: 64,
            seed: 17,
        }
    }
}

/// One pre-norm transformer block's weights.
#[derive(Debug, Clone)]
pub struct ToyLayer {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_up: Array2<f64>,
    pub b_up: Array1<f64>,
    pub w_down: Array2<f64>,
    pub b_down: Array1<f64>,
}

pub struct ToyEncoder {
    cfg: ToyEncoderConfig,
    heads: usize,
    layers: Vec<ToyLayer>,
    cls_token: Array1<f64>,
    pos_embed: Array2<f64>,
    /// Mean of image-token positional rows; the head subtracts it.
    pos_mean: Array1<f64>,
    /// Seeded orthonormal concept basis, one column per descriptor slot.
    concept_basis: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two uniform draws.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| gaussian(rng) * std).collect();
    Array2::from_shape_vec((rows, cols), data).expect("shape matches data")
}

fn random_vector(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Array1<f64> {
    Array1::from_vec((0..len).map(|_| gaussian(rng) * std).collect())
}

/// Orthonormal basis via Gram-Schmidt on a seeded Gaussian matrix.
fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize) -> Array2<f64> {
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v = random_vector(rng, dim, 1.0);
        for c in &cols {
            let proj = v.dot(c);
            v = &v - &(c * proj);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            cols.push(v / n);
        }
    }
    let mut q = Array2::zeros((dim, dim));
    for (j, c) in cols.iter().enumerate() {
        q.column_mut(j).assign(c);
    }
    q
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn layer_norm(row: &[f64], gain: &Array1<f64>, bias: &Array1<f64>) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    row.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gain[i] + bias[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

impl ToyEncoder {
    pub fn new(cfg: ToyEncoderConfig) -> Result<Self> {
        if cfg.layers < 2 {
            return Err(Error::Config("toy encoder needs at least 2 layers".into()));
        }
        if cfg.dim != 16 {
            return Err(Error::Config(
                "toy encoder uses the 16-dim measurement space".into(),
            ));
        }
        if cfg.grid < 1 || cfg.input_side % cfg.grid != 0 {
            return Err(Error::Config(
                "input side must be a positive multiple of the grid side".into(),
            ));
        }
        let heads = 2;
        let d = cfg.dim;
        let k = cfg.grid * cfg.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let concept_basis = orthonormal_basis(&mut rng, d);
        let cls_token = random_vector(&mut rng, d, 0.3);
        let pos_embed = random_matrix(&mut rng, k + 1, d, 0.02);
        let mut pos_mean = Array1::zeros(d);
        for p in 1..=k {
            pos_mean = pos_mean + pos_embed.row(p).to_owned();
        }
        pos_mean /= k as f64;

        let std = 0.005;
        let layers = (0..cfg.layers)
            .map(|_| ToyLayer {
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                wq: random_matrix(&mut rng, d, d, std),
                bq: random_vector(&mut rng, d, std),
                wk: random_matrix(&mut rng, d, d, std),
                bk: random_vector(&mut rng, d, std),
                wv: random_matrix(&mut rng, d, d, std),
                bv: random_vector(&mut rng, d, std),
                wo: random_matrix(&mut rng, d, d, std),
                bo: random_vector(&mut rng, d, std),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
                w_up: random_matrix(&mut rng, d, 2 * d, std),
                b_up: random_vector(&mut rng, 2 * d, std),
                w_down: random_matrix(&mut rng, 2 * d, d, std),
                b_down: random_vector(&mut rng, d, std),
            })
            .collect();

        Ok(Self {
            cfg,
            heads,
            layers,
            cls_token,
            pos_embed,
            pos_mean,
            concept_basis,
        })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[ToyLayer] {
        &self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn cls_token(&self) -> &Array1<f64> {
        &self.cls_token
    }

    pub fn pos_embed(&self) -> &Array2<f64> {
        &self.pos_embed
    }

    pub fn concept_basis(&self) -> &Array2<f64> {
        &self.concept_basis
    }

    /// Per-patch measurement descriptors for an image at the encoder input
    /// size: palette-color fractions, lit fraction, axis/diagonal edge energy.
    pub fn patch_descriptors(&self, image: &ImageData) -> Vec<Array1<f64>> {
        self.grid_descriptors(image, self.cfg.grid)
    }

    fn grid_descriptors(&self, image: &ImageData, grid: usize) -> Vec<Array1<f64>> {
        let side = self.cfg.input_side;
        debug_assert_eq!(side % grid, 0);
        let resized;
        let img = if image.shape() == (side, side) {
            image
        } else {
            resized = image.resize_bilinear(side, side);
            &resized
        };

        // precompute luma and central-difference gradients
        let mut luma = vec![0.0f64; side * side];
        for y in 0..side {
            for x in 0..side {
                luma[y * side + x] = img.luma(x, y);
            }
        }
        let grad = |x: usize, y: usize| -> (f64, f64) {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(side - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(side - 1);
            let gx = (luma[y * side + xp] - luma[y * side + xm]) / 2.0;
            let gy = (luma[yp * side + x] - luma[ym * side + x]) / 2.0;
            (gx, gy)
        };

        let cell = side / grid;
        let mut descriptors = Vec::with_capacity(grid * grid);
        for gy in 0..grid {
            for gx in 0..grid {
                let mut desc = Array1::zeros(self.cfg.dim);
                let mut lit = 0.0;
                let mut axis = 0.0;
                let mut diag_pos = 0.0;
                let mut diag_neg = 0.0;
                for py in gy * cell..(gy + 1) * cell {
                    for px in gx * cell..(gx + 1) * cell {
                        let l = luma[py * side + px];
                        if l > LIT_THRESHOLD {
                            lit += 1.0;
                            let rgb = img.get(px, py);
                            if let Some(c) = nearest_palette(rgb) {
                                desc[c] += 1.0;
                            }
                        }
                        let (dx, dy) = grad(px, py);
                        let (ax, ay) = (dx.abs(), dy.abs());
                        let m = ax.min(ay);
                        axis += ax + ay - 2.0 * m;
                        if dx * dy > 0.0 {
                            diag_pos += 2.0 * m;
                        } else {
                            diag_neg += 2.0 * m;
                        }
                    }
                }
                let n = (cell * cell) as f64;
                for c in 0..PALETTE.len() {
                    desc[c] /= n;
                }
                desc[SLOT_LIT] = lit / n;
                desc[SLOT_AXIS] = axis * EDGE_GAIN / n;
                desc[SLOT_DIAG_POS] = diag_pos * EDGE_GAIN / n;
                desc[SLOT_DIAG_NEG] = diag_neg * EDGE_GAIN / n;
                descriptors.push(desc);
            }
        }
        descriptors
    }

    /// Concept activations recovered from a pooled measurement vector.
    fn activations(&self, pooled: &Array1<f64>) -> Array1<f64> {
        let mut a = Array1::zeros(self.cfg.dim);
        for c in 0..PALETTE.len() {
            a[c] = pooled[c].max(0.0);
        }
        let lit = pooled[SLOT_LIT].max(0.0);
        let axis = pooled[SLOT_AXIS].max(0.0);
        let diag_pos = pooled[SLOT_DIAG_POS].max(0.0);
        let diag_neg = pooled[SLOT_DIAG_NEG].max(0.0);
        let diag = diag_pos + diag_neg;
        let edge = axis + diag;
        if edge > 1e-9 && lit > 1e-9 {
            // shape evidence scaled like a color fraction, so neither signal
            // drowns the other in the cosine
            let diag_share = diag / edge;
            let diag_balance = if diag > 1e-9 {
                (diag_pos - diag_neg).abs() / diag
            } else {
                0.0
            };
            for proto in SHAPE_PROTOS {
                let zd = (diag_share - proto.diag_share) / DIAG_SD;
                let zb = (diag_balance - proto.diag_balance) / balance_sd(proto.slot);
                // cube root flattens within-shape kernel variation so the
                // feature direction stays stable across renders of one shape
                a[proto.slot] = lit * (-(zd * zd + zb * zb) / 2.0).exp().cbrt();
            }
        }
        a[SLOT_BIAS] = BIAS_ACTIVATION;
        a
    }

    fn concept_feature(&self, activations: &Array1<f64>) -> FeatureVector {
        FeatureVector {
            values: self.concept_basis.dot(activations).to_vec(),
        }
    }

    /// Post-softmax CLS attention row for each head at the given layer; used
    /// to verify that masked weights are exactly zero and rows renormalize.
    pub fn cls_attention_weights(
        &self,
        layer: usize,
        seq: &TokenSequence,
        mask: Option<&AttentionMaskSpec>,
    ) -> Vec<Vec<f64>> {
        let (_, attn_rows) = self.attention(layer, seq, mask);
        attn_rows
    }

    /// Attention sublayer: returns the residual-added output tokens and the
    /// per-head post-softmax CLS row.
    fn attention(
        &self,
        layer: usize,
        seq: &TokenSequence,
        mask: Option<&AttentionMaskSpec>,
    ) -> (Array2<f64>, Vec<Vec<f64>>) {
        let lw = &self.layers[layer - 1];
        let n = seq.tokens.nrows();
        let d = self.cfg.dim;
        let dh = d / self.heads;
        let masked = mask.map(|m| m.applies_at(layer)).unwrap_or(false);

        let mut h = Array2::zeros((n, d));
        for i in 0..n {
            let normed = layer_norm(
                seq.tokens.row(i).as_slice().expect("contiguous row"),
                &lw.ln1_gain,
                &lw.ln1_bias,
            );
            for j in 0..d {
                h[[i, j]] = normed[j];
            }
        }
        let q = h.dot(&lw.wq) + &lw.bq;
        let k = h.dot(&lw.wk) + &lw.bk;
        let v = h.dot(&lw.wv) + &lw.bv;

        let mut ctx = Array2::zeros((n, d));
        let mut cls_rows = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let lo = head * dh;
            let hi = lo + dh;
            for i in 0..n {
                let mut logits = vec![0.0f64; n];
                for j in 0..n {
                    let mut dot = 0.0;
                    for c in lo..hi {
                        dot += q[[i, c]] * k[[j, c]];
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
                if masked && i == 0 {
                    let outside = &mask.expect("masked implies mask").outside_tokens;
                    for (t, &out) in outside.iter().enumerate() {
                        if out {
                            logits[1 + t] = f64::NEG_INFINITY;
                        }
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f64 = weights.iter().sum();
                for w in &mut weights {
                    *w /= sum;
                }
                for (j, &w) in weights.iter().enumerate() {
                    for c in lo..hi {
                        ctx[[i, c]] += w * v[[j, c]];
                    }
                }
                if i == 0 {
                    cls_rows.push(weights.clone());
                }
            }
        }
        let out = &seq.tokens + &(ctx.dot(&lw.wo) + &lw.bo);
        (out, cls_rows)
    }

    fn mlp(&self, layer: usize, tokens: &Array2<f64>) -> Array2<f64> {
        let lw = &self.layers[layer - 1];
        let n = tokens.nrows();
        let d = self.cfg.dim;
        let mut h = Array2::zeros((n, d));
        for i in 0..n {
            let normed = layer_norm(
                tokens.row(i).as_slice().expect("contiguous row"),
                &lw.ln2_gain,
                &lw.ln2_bias,
            );
            for j in 0..d {
                h[[i, j]] = normed[j];
            }
        }
        let up = (h.dot(&lw.w_up) + &lw.b_up).mapv(gelu);
        tokens + &(up.dot(&lw.w_down) + &lw.b_down)
    }
}


fn nearest_palette(rgb: [u8; 3]) -> Option<usize> {
    let dist2 = |a: [u8; 3], b: [u8; 3]| -> i64 {
        (0..3)
            .map(|c| {
                let d = a[c] as i64 - b[c] as i64;
                d * d
            })
            .sum()
    };
    let mut best = None;
    let mut best_d = dist2(rgb, [0, 0, 0]); // background/black wins ties
    for (i, (_, color)) in PALETTE.iter().enumerate() {
        let d = dist2(rgb, *color);
        if d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    best
}

impl LayeredEncoder for ToyEncoder {
    fn spec(&self) -> LayeredEncoderSpec {
        LayeredEncoderSpec {
            num_layers: self.cfg.layers,
            embed_dim: self.cfg.dim,
            grid_side: self.cfg.grid,
            input_side: self.cfg.input_side,
        }
    }

    fn embed(&self, image: &ImageData) -> TokenSequence {
        let k = self.cfg.grid * self.cfg.grid;
        let d = self.cfg.dim;
        let descriptors = self.patch_descriptors(image);
        let mut tokens = Array2::zeros((k + 1, d));
        for j in 0..d {
            tokens[[0, j]] = self.cls_token[j] + self.pos_embed[[0, j]];
        }
        for (p, desc) in descriptors.iter().enumerate() {
            for j in 0..d {
                tokens[[1 + p, j]] = desc[j] + self.pos_embed[[1 + p, j]];
            }
        }
        TokenSequence { layer: 0, tokens }
    }

    fn run_layer(
        &self,
        layer: usize,
        seq: &TokenSequence,
        mask: Option<&AttentionMaskSpec>,
    ) -> Result<TokenSequence> {
        if layer < 1 || layer > self.cfg.layers {
            return Err(Error::Config(format!(
                "layer {layer} out of range 1..={}",
                self.cfg.layers
            )));
        }
        let (after_attn, _) = self.attention(layer, seq, mask);
        let tokens = self.mlp(
            layer,
            &after_attn,
        );
        Ok(TokenSequence { layer, tokens })
    }

    fn project_cls(&self, seq: &TokenSequence) -> FeatureVector {
        let k = seq.num_image_tokens();
        let d = self.cfg.dim;
        let mut pooled = Array1::zeros(d);
        for p in 1..=k {
            pooled = pooled + seq.tokens.row(p).to_owned();
        }
        pooled /= k as f64;
        pooled = pooled - &self.pos_mean;
        let a = self.activations(&pooled);
        self.concept_feature(&a)
    }
}

const STOP_WORDS: [&str; 24] = [
    "the", "a", "an", "of", "on", "at", "to", "in", "is", "that", "which", "with", "and", "its",
    "it", "this", "most", "one", "side", "part", "from", "by", "near", "next",
];

const POSITION_SIZE_WORDS: [&str; 22] = [
    "left", "right", "top", "bottom", "upper", "lower", "above", "below", "under", "middle",
    "center", "centre", "leftmost", "rightmost", "inside", "within", "small", "big", "large",
    "little", "tiny", "smaller",
];

fn shape_slot(word: &str) -> Option<usize> {
    match word {
        "circle" | "circles" => Some(SLOT_CIRCLE),
        "square" | "squares" => Some(SLOT_SQUARE),
        "triangle" | "triangles" => Some(SLOT_TRIANGLE),
        _ => None,
    }
}

fn color_slot(word: &str) -> Option<usize> {
    PALETTE.iter().position(|(name, _)| *name == word)
}

impl TextEncoder for ToyEncoder {
    fn encode_text(&self, text: &str) -> Result<FeatureVector> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let words: Vec<String> = text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();

        let d = self.cfg.dim;
        let mut a: Array1<f64> = Array1::zeros(d);
        let mut extra: Array1<f64> = Array1::zeros(d);
        for w in &words {
            if let Some(slot) = color_slot(w) {
                a[slot] += 1.0;
            } else if let Some(slot) = shape_slot(w) {
                a[slot] += 1.0;
            } else if STOP_WORDS.contains(&w.as_str())
                || POSITION_SIZE_WORDS.contains(&w.as_str())
                || w == "bigger"
                || w == "larger"
            {
                // spatial/grammatical words carry no visual concept
            } else {
                // unknown content word: deterministic pseudo-embedding
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ fnv1a(w));
                let v = random_vector(&mut rng, d, 1.0);
                let n = v.dot(&v).sqrt();
                extra = extra + &(v * (0.25 / n));
            }
        }

        let slots_active = a.iter().any(|&v| v > 0.0);
        let mut feature = self.concept_basis.dot(&a) + &extra;
        if !slots_active && extra.iter().all(|&v| v == 0.0) {
            // only stop words: fall back to a hash of the whole text
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ fnv1a(text.trim()));
            let v = random_vector(&mut rng, d, 1.0);
            let n = v.dot(&v).sqrt();
            feature = v / n;
        }
        let norm = feature.dot(&feature).sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNormFeature);
        }
        Ok(FeatureVector {
            values: feature.to_vec(),
        })
    }
}

impl ToyEncoder {
    /// Similarity of the text feature to each grid cell's concept activation.
    /// Any grid that divides the input side works; the default localizer uses
    /// a fine grid, tests can request the transformer's token grid.
    pub fn token_similarity_grid(
        &self,
        image: &ImageData,
        text: &str,
        grid: usize,
    ) -> Result<Array2<f64>> {
        let f_text = self.encode_text(text)?;
        let descriptors = self.grid_descriptors(image, grid);
        let mut map = Array2::zeros((grid, grid));
        for gy in 0..grid {
            for gx in 0..grid {
                let a = self.activations(&descriptors[gy * grid + gx]);
                let feat = self.concept_feature(&a);
                let score = super::cosine(&feat, &f_text).unwrap_or(0.0);
                map[[gy, gx]] = score;
            }
        }
        Ok(map)
    }
}

impl LocalizationProvider for ToyEncoder {
    /// Grounding-style localization: score each measurement cell's concept
    /// activation against the text feature and return the raw grid map.
    /// Localizes the expression's referent, so when the text decomposes into
    /// a head phrase plus relations, the head phrase drives the map (anchor
    /// objects should guide relations, not soak up coherence heat).
    fn locate(&self, image: &ImageData, text: &str) -> Result<Array2<f64>> {
        let focus = match crate::parse::parse_expression(text) {
            Ok(parsed) if !parsed.head_phrase.trim().is_empty() => parsed.head_phrase,
            _ => text.to_string(),
        };
        // pixel-resolution measurement grid: sharp maps make the spatial
        // score punish incomplete masks instead of grid-phase artifacts
        self.token_similarity_grid(image, &focus, self.cfg.input_side)
    }
}

/// Seeded pseudo-random bytes; handy for tests that need arbitrary images.
pub fn seeded_noise_image(height: usize, width: usize, seed: u64) -> ImageData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = vec![0u8; height * width * 3];
    rng.fill_bytes(&mut pixels);
    ImageData::from_pixels(height, width, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::cosine;

    fn enc() -> ToyEncoder {
        ToyEncoder::new(ToyEncoderConfig::default()).unwrap()
    }

    #[test]
    fn text_encoding_is_deterministic() {
        let e = enc();
        let a = e.encode_text("the red circle").unwrap();
        let b = e.encode_text("the red circle").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keywords_map_to_orthogonal_seeded_vectors() {
        let e = enc();
        let circle = e.encode_text("circle").unwrap();
        let square = e.encode_text("square").unwrap();
        let dot: f64 = circle
            .values
            .iter()
            .zip(&square.values)
            .map(|(x, y)| x * y)
            .sum();
        assert!(dot.abs() < 1e-12, "dot = {dot}");

        let other = ToyEncoder::new(ToyEncoderConfig {
            seed: 99,
            ..ToyEncoderConfig::default()
        })
        .unwrap();
        let circle2 = other.encode_text("circle").unwrap();
        assert_ne!(circle, circle2, "vectors should depend on the seed");
    }

    #[test]
    fn whitespace_only_text_errors() {
        let e = enc();
        assert!(matches!(e.encode_text("   "), Err(Error::EmptyText)));
        assert!(matches!(e.encode_text(""), Err(Error::EmptyText)));
    }

    #[test]
    fn forward_pass_is_deterministic_and_finite() {
        let e = enc();
        let img = seeded_noise_image(64, 64, 3);
        let mut seq = e.embed(&img);
        for l in 1..=4 {
            seq = e.run_layer(l, &seq, None).unwrap();
            assert!(seq.is_finite());
        }
        let f = e.project_cls(&seq);
        assert!(f.norm() > 0.0);

        let e2 = enc();
        let mut seq2 = e2.embed(&img);
        for l in 1..=4 {
            seq2 = e2.run_layer(l, &seq2, None).unwrap();
        }
        assert_eq!(f, e2.project_cls(&seq2));
    }

    #[test]
    fn masked_cls_attention_weights_are_zero_outside() {
        let e = enc();
        let img = seeded_noise_image(64, 64, 5);
        let seq = e.embed(&img);
        let outside: Vec<bool> = (0..16).map(|i| i % 2 == 0).collect();
        let mask = AttentionMaskSpec {
            outside_tokens: outside.clone(),
            applies_from_layer: 1,
        };
        for head_row in e.cls_attention_weights(1, &seq, Some(&mask)) {
            let sum: f64 = head_row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for (t, &out) in outside.iter().enumerate() {
                if out {
                    assert_eq!(head_row[1 + t], 0.0);
                }
            }
        }
    }

    #[test]
    fn concept_basis_is_orthonormal() {
        let e = enc();
        let q = e.concept_basis();
        let qtq = q.t().dot(q);
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[[i, j]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn color_words_match_colored_regions() {
        let e = enc();
        // red image vs blue image, compared against the word "red"
        let red = ImageData::filled(64, 64, [220, 50, 50]);
        let blue = ImageData::filled(64, 64, [60, 90, 220]);
        let t = e.encode_text("red").unwrap();
        let run = |img: &ImageData| {
            let mut seq = e.embed(img);
            for l in 1..=4 {
                seq = e.run_layer(l, &seq, None).unwrap();
            }
            e.project_cls(&seq)
        };
        let s_red = cosine(&run(&red), &t).unwrap();
        let s_blue = cosine(&run(&blue), &t).unwrap();
        assert!(
            s_red > s_blue + 0.1,
            "red image should align with 'red': {s_red} vs {s_blue}"
        );
    }
}
