//! 8-bit image buffers and the pixel-level operations used by the pipelines.

use crate::error::{Error, Result};

/// Row-major image with interleaved channels (`(y * width + x) * channels + c`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn round_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Augment(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Augment(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Augment(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn from_fn(&self, width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..self.channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels: self.channels,
            data,
        }
    }

    fn map_samples(&self, f: impl Fn(usize, u8) -> u8) -> Self {
        Self {
            data: self.data.iter().enumerate().map(|(i, v)| f(i, *v)).collect(),
            ..self.clone()
        }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |o: usize, s: f64, n: usize| {
            let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, p - i0 as f64)
        };
        self.from_fn(width, height, |x, y, c| {
            let (x0, x1, fx) = axis(x, sx, self.width);
            let (y0, y1, fy) = axis(y, sy, self.height);
            let top = self.get(x0, y0, c) as f64 * (1.0 - fx) + self.get(x1, y0, c) as f64 * fx;
            let bottom = self.get(x0, y1, c) as f64 * (1.0 - fx) + self.get(x1, y1, c) as f64 * fx;
            round_u8(top * (1.0 - fy) + bottom * fy)
        })
    }

    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || left + width > self.width || top + height > self.height {
            return Err(Error::Augment(format!(
                "crop {width}x{height}+{left}+{top} outside {}x{} image",
                self.width, self.height
            )));
        }
        Ok(self.from_fn(width, height, |x, y, c| self.get(left + x, top + y, c)))
    }

    pub fn center_crop(&self, width: usize, height: usize) -> Result<Self> {
        if width > self.width || height > self.height {
            return Err(Error::Augment(format!(
                "center crop {width}x{height} larger than {}x{} image",
                self.width, self.height
            )));
        }
        self.crop((self.width - width) / 2, (self.height - height) / 2, width, height)
    }

    pub fn hflip(&self) -> Self {
        self.from_fn(self.width, self.height, |x, y, c| self.get(self.width - 1 - x, y, c))
    }

    pub fn vflip(&self) -> Self {
        self.from_fn(self.width, self.height, |x, y, c| self.get(x, self.height - 1 - y, c))
    }

    /// Bilinear sample where every tap outside the image reads 0.
    fn sample_zero_fill(&self, x: f64, y: f64, c: usize) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let tap = |xi: f64, yi: f64| {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                self.get(xi as usize, yi as usize, c) as f64
            }
        };
        let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1.0, y0) * fx;
        let bottom = tap(x0, y0 + 1.0) * (1.0 - fx) + tap(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Affine warp about the image center: scale, then horizontal shear,
    /// then rotation (positive angles turn the picture counter-clockwise as
    /// displayed), then translation. Inverse-mapped with bilinear sampling;
    /// uncovered pixels are 0.
    pub fn affine(&self, angle_deg: f64, shear_deg: f64, scale: f64, translate: (f64, f64)) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Augment(format!("affine scale must be positive, got {scale}")));
        }
        if angle_deg == 0.0 && shear_deg == 0.0 && scale == 1.0 && translate == (0.0, 0.0) {
            return Ok(self.clone());
        }
        let (sin, cos) = angle_deg.to_radians().sin_cos();
        let shear = shear_deg.to_radians().tan();
        // forward map on centered coordinates (y pointing down):
        // R = [[cos, sin], [-sin, cos]], Sh = [[1, shear], [0, 1]], S = scale
        let (a, b) = (cos * scale, (cos * shear + sin) * scale);
        let (c, d) = (-sin * scale, (-sin * shear + cos) * scale);
        let det = a * d - b * c;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        Ok(self.from_fn(self.width, self.height, |x, y, ch| {
            let dx = x as f64 - cx - translate.0;
            let dy = y as f64 - cy - translate.1;
            let sx = ia * dx + ib * dy + cx;
            let sy = ic * dx + id * dy + cy;
            round_u8(self.sample_zero_fill(sx, sy, ch))
        }))
    }

    pub fn rotate(&self, angle_deg: f64) -> Self {
        self.affine(angle_deg, 0.0, 1.0, (0.0, 0.0)).expect("unit scale")
    }

    /// Multiplies every sample by `factor`.
    pub fn adjust_brightness(&self, factor: f64) -> Self {
        if factor == 1.0 {
            return self.clone();
        }
        self.map_samples(|_, v| round_u8(v as f64 * factor))
    }

    fn luma(&self, pixel: usize) -> f64 {
        if self.channels == 1 {
            self.data[pixel] as f64
        } else {
            let p = &self.data[pixel * 3..pixel * 3 + 3];
            0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
        }
    }

    /// Blends with the image's mean luma.
    pub fn adjust_contrast(&self, factor: f64) -> Self {
        if factor == 1.0 {
            return self.clone();
        }
        let n = self.width * self.height;
        let mean = (0..n).map(|i| self.luma(i)).sum::<f64>() / n as f64;
        self.map_samples(|_, v| round_u8(mean + factor * (v as f64 - mean)))
    }

    /// Blends each pixel with its own luma; a no-op on grayscale.
    pub fn adjust_saturation(&self, factor: f64) -> Self {
        if factor == 1.0 || self.channels == 1 {
            return self.clone();
        }
        self.map_samples(|i, v| {
            let l = self.luma(i / 3);
            round_u8(l + factor * (v as f64 - l))
        })
    }

    /// Rotates chroma in YIQ space by `shift` turns; a no-op on grayscale.
    pub fn adjust_hue(&self, shift: f64) -> Self {
        if shift == 0.0 || self.channels == 1 {
            return self.clone();
        }
        let (s, c) = (shift * std::f64::consts::TAU).sin_cos();
        let mut data = self.data.clone();
        for px in data.chunks_mut(3) {
            let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
            let y = 0.299 * r + 0.587 * g + 0.114 * b;
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i2, q2) = (i * c - q * s, i * s + q * c);
            px[0] = round_u8(y + 0.956 * i2 + 0.621 * q2);
            px[1] = round_u8(y - 0.272 * i2 - 0.647 * q2);
            px[2] = round_u8(y - 1.106 * i2 + 1.703 * q2);
        }
        Self { data, ..self.clone() }
    }

    /// Blends with a 3x3 smoothed copy (center weight 5, others 1); border
    /// pixels keep their values in the smoothed copy.
    pub fn adjust_sharpness(&self, factor: f64) -> Self {
        if factor == 1.0 || self.width < 3 || self.height < 3 {
            return self.clone();
        }
        let smooth = self.from_fn(self.width, self.height, |x, y, c| {
            if x == 0 || y == 0 || x == self.width - 1 || y == self.height - 1 {
                return self.get(x, y, c);
            }
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let w = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                    acc += w * self.get(x + dx - 1, y + dy - 1, c) as f64;
                }
            }
            round_u8(acc / 13.0)
        });
        self.map_samples(|i, v| {
            let b = smooth.data[i] as f64;
            round_u8(b + factor * (v as f64 - b))
        })
    }

    /// Separable Gaussian blur with an odd `kernel` size; edges replicate.
    pub fn gaussian_blur(&self, kernel: usize, sigma: f64) -> Result<Self> {
        if kernel % 2 == 0 || !(sigma > 0.0) {
            return Err(Error::Augment(format!(
                "blur needs an odd kernel and positive sigma, got {kernel} and {sigma}"
            )));
        }
        let r = (kernel / 2) as isize;
        let weights: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut horizontal = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let acc: f64 = (-r..=r)
                        .map(|k| {
                            let xi = (x + k).clamp(0, w - 1) as usize;
                            weights[(k + r) as usize] * self.get(xi, y as usize, c) as f64
                        })
                        .sum();
                    horizontal[(y as usize * self.width + x as usize) * self.channels + c] = acc;
                }
            }
        }
        Ok(self.from_fn(self.width, self.height, |x, y, c| {
            let acc: f64 = (-r..=r)
                .map(|k| {
                    let yi = (y as isize + k).clamp(0, h - 1) as usize;
                    weights[(k + r) as usize] * horizontal[(yi * self.width + x) * self.channels + c]
                })
                .sum();
            round_u8(acc)
        }))
    }

    /// Keeps the top `bits` bits of every sample.
    pub fn posterize(&self, bits: u32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Augment(format!("posterize bits must be in 1..=8, got {bits}")));
        }
        let mask = (0xFFu16 << (8 - bits)) as u8;
        Ok(self.map_samples(|_, v| v & mask))
    }

    /// Unit-range floats in channel-height-width order.
    pub fn to_chw_unit(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; plane * self.channels];
        for (i, v) in self.data.iter().enumerate() {
            let (p, c) = (i / self.channels, i % self.channels);
            out[c * plane + p] = *v as f32 / 255.0;
        }
        out
    }
}
