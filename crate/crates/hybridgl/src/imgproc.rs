//! RGB image buffers and the pixel-level operations the encoder front end
//! needs: bilinear resize, Gaussian blur with reflected borders, PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    height: usize,
    width: usize,
    pixels: Vec<u8>, // len = H * W * 3
}

impl ImageData {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        Self {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer must be H*W*3");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(height, width);
        for i in 0..height * width {
            img.pixels[i * 3..i * 3 + 3].copy_from_slice(&rgb);
        }
        img
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
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Luma in [0, 1] (mean of the three channels).
    #[inline]
    pub fn luma(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.get(x, y);
        (r as f64 + g as f64 + b as f64) / (3.0 * 255.0)
    }

    /// Bilinear resize with pixel-center alignment. Returns a clone when the
    /// target shape equals the source shape, so same-size resize is exact.
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> ImageData {
        assert!(new_height >= 1 && new_width >= 1);
        if new_height == self.height && new_width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / new_height as f64;
        let sx = self.width as f64 / new_width as f64;
        let mut out = ImageData::new(new_height, new_width);
        for y in 0..new_height {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for x in 0..new_width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let p00 = self.get(x0, y0)[c] as f64;
                    let p10 = self.get(x1, y0)[c] as f64;
                    let p01 = self.get(x0, y1)[c] as f64;
                    let p11 = self.get(x1, y1)[c] as f64;
                    let top = p00 * (1.0 - fx) + p10 * fx;
                    let bot = p01 * (1.0 - fx) + p11 * fx;
                    rgb[c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, rgb);
            }
        }
        out
    }

    /// Separable Gaussian blur, kernel radius 2σ, symmetric border reflection.
    pub fn gaussian_blur(&self, sigma: f64) -> ImageData {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (2.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
        for i in -radius..=radius {
            kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
        }
        let sum: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= sum;
        }

        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - i - 1;
                } else {
                    return i as usize;
                }
            }
        };

        // horizontal pass into a float buffer, then vertical pass
        let mut tmp = vec![0.0f64; self.height * self.width * 3];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sx = reflect(x as isize + ki as isize - radius, self.width);
                        acc += k * self.get(sx, y)[c] as f64;
                    }
                    tmp[(y * self.width + x) * 3 + c] = acc;
                }
            }
        }
        let mut out = ImageData::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (ki, k) in kernel.iter().enumerate() {
                        let sy = reflect(y as isize + ki as isize - radius, self.height);
                        acc += k * tmp[(sy * self.width + x) * 3 + c];
                    }
                    rgb[c] = acc.round().clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, rgb);
            }
        }
        out
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<ImageData> {
        let img = image::open(path.as_ref())
            .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Ok(ImageData::from_pixels(
            h as usize,
            w as usize,
            img.into_raw(),
        ))
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("pixel buffer matches dimensions");
        buf.save(path.as_ref())
            .map_err(|e| Error::Image(format!("{}: {e}", path.as_ref().display())))
    }
}

/// Alpha-blend a mask over an image (for overlay output). `color` is painted
/// at `alpha` opacity wherever the mask is true.
pub fn blend_mask(image: &ImageData, mask: &BinaryMask, color: [u8; 3], alpha: f64) -> ImageData {
    assert_eq!(image.shape(), mask.shape(), "overlay shape mismatch");
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if mask.get(x, y) {
                let p = image.get(x, y);
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    rgb[c] = (p[c] as f64 * (1.0 - alpha) + color[c] as f64 * alpha)
                        .round()
                        .clamp(0.0, 255.0) as u8;
                }
                out.set(x, y, rgb);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_of_constant_image_is_identity() {
        let img = ImageData::filled(8, 8, [120, 45, 200]);
        assert_eq!(img.gaussian_blur(5.0), img);
    }

    #[test]
    fn blur_reduces_checkerboard_variance() {
        let img = ImageData::from_pixels(
            8,
            8,
            (0..8 * 8)
                .flat_map(|i| {
                    let v = if (i / 8 + i % 8) % 2 == 0 { 255 } else { 0 };
                    [v, v, v]
                })
                .collect(),
        );
        let blurred = img.gaussian_blur(2.0);
        let var = |im: &ImageData| {
            let vals: Vec<f64> = (0..64).map(|i| im.pixels()[i * 3] as f64).collect();
            let mean = vals.iter().sum::<f64>() / 64.0;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0
        };
        assert!(var(&blurred) < var(&img));
    }

    #[test]
    fn resize_same_shape_is_exact() {
        let mut img = ImageData::new(5, 7);
        img.set(3, 2, [9, 8, 7]);
        assert_eq!(img.resize_bilinear(5, 7), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageData::filled(10, 10, [77, 77, 77]);
        let small = img.resize_bilinear(4, 4);
        assert!(small.pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = ImageData::new(6, 9);
        img.set(2, 3, [1, 2, 3]);
        img.set(8, 5, [200, 100, 50]);
        img.write_png(&path).unwrap();
        assert_eq!(ImageData::read_png(&path).unwrap(), img);
    }
}
