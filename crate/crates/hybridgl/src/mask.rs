//! Binary masks, COCO-style uncompressed run-length encoding, and IoU.
//!
//! RLE is column-major (Fortran order) with the first count giving the number
//! of leading `false` pixels, possibly zero. The wire format is the JSON
//! object `{"size": [H, W], "counts": [int, ...]}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A binary H×W mask over an image. Stored row-major in memory; the canonical
/// interchange representation is [`Rle`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask must be at least 1x1");
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        m
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "bit count must equal H*W");
        assert!(height >= 1 && width >= 1, "mask must be at least 1x1");
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of true pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Complement mask (true where this mask is false).
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// Pixel union of two masks.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        check_same_shape(self, other)?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a | b)
                .collect(),
        })
    }

    /// Nearest-neighbor resize, used when bringing a mask to the encoder's
    /// input grid. A full mask stays full; an empty mask stays empty.
    pub fn resize_nearest(&self, new_height: usize, new_width: usize) -> BinaryMask {
        assert!(new_height >= 1 && new_width >= 1);
        if new_height == self.height && new_width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / new_height as f64;
        let sx = self.width as f64 / new_width as f64;
        BinaryMask::from_fn(new_height, new_width, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }
}

/// COCO-style uncompressed RLE: column-major counts, leading-false-count first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rle {
    /// `[H, W]`
    pub size: [usize; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    /// Foreground pixel count (sum of odd-indexed runs).
    pub fn area(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 1)
            .map(|(_, &c)| c as usize)
            .sum()
    }
}

/// Encode a mask as column-major RLE. Total function: every mask has exactly
/// one encoding and `rle_decode(rle_encode(m)) == m`.
pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let (h, w) = mask.shape();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run: u32 = 0;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

/// Decode a column-major RLE back to a mask. Errors if the counts do not sum
/// to exactly H*W.
pub fn rle_decode(rle: &Rle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    if h == 0 || w == 0 {
        return Err(Error::InvalidRle("zero-sized mask".into()));
    }
    let n = h * w;
    let total: usize = rle.counts.iter().map(|&c| c as usize).sum();
    if total != n {
        return Err(Error::InvalidRle(format!(
            "counts sum to {total}, expected {n}"
        )));
    }
    let mut bits = vec![false; n];
    let mut idx = 0usize;
    let mut value = false;
    for &c in &rle.counts {
        for _ in 0..c {
            // column-major flat index -> (x, y)
            let x = idx / h;
            let y = idx % h;
            bits[y * w + x] = value;
            idx += 1;
        }
        value = !value;
    }
    Ok(BinaryMask {
        height: h,
        width: w,
        bits,
    })
}

fn check_same_shape(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected_h: a.height,
            expected_w: a.width,
            got_h: b.height,
            got_w: b.width,
        });
    }
    Ok(())
}

/// Intersection and union pixel counts in a single pass.
pub fn intersection_union(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize)> {
    check_same_shape(a, b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x & y) as usize;
        union += (x | y) as usize;
    }
    Ok((inter, union))
}

/// Intersection-over-union. Zero when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = intersection_union(a, b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Tight axis-aligned bounding box, inclusive coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    /// Box midpoint in (x, y) pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }
}

/// Tight bounding box and its midpoint. The midpoint, not the centroid, is
/// what downstream relation tests use as the object position.
pub fn bbox_and_center(mask: &BinaryMask) -> Result<(BoundingBox, (f64, f64))> {
    let (h, w) = mask.shape();
    let mut x_min = w;
    let mut x_max = 0usize;
    let mut y_min = h;
    let mut y_max = 0usize;
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                any = true;
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    let bbox = BoundingBox {
        x_min,
        y_min,
        x_max,
        y_max,
    };
    let center = bbox.center();
    Ok((bbox, center))
}
