//! In-memory RGB images, pixel masks and bilinear resampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 8;

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "{width}x{height} RGB needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!(
                "value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        Self::new(width, height, data)
    }

    /// Builds an image from a per-pixel function, clamping values into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_at(&self, index: usize) -> [f32; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub(crate) fn set_pixel_at(&mut self, index: usize, rgb: [f32; 3]) {
        let i = index * 3;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[i + c] = v.clamp(0.0, 1.0);
        }
    }

    /// Planar `[3, H, W]` tensor for the classifier.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.pixel_count();
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], out)
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Result<ImageRgb> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let mut channels = Vec::with_capacity(3);
        for c in 0..3 {
            let plane: Vec<f32> = self.data.iter().skip(c).step_by(3).copied().collect();
            channels.push(resize_bilinear(&plane, self.width, self.height, width, height));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            data.extend(channels.iter().map(|ch| ch[i].clamp(0.0, 1.0)));
        }
        ImageRgb::new(width, height, data)
    }

    /// Number of pixels whose RGB triple differs in any bit.
    pub fn count_differing_pixels(&self, other: &ImageRgb) -> usize {
        self.data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .filter(|(a, b)| a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()))
            .count()
    }
}

/// Boolean per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidMask(format!(
                "{width}x{height} mask needs {} entries, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Nearest-neighbour upsampling followed by a one-pixel (3x3) dilation, so
    /// that no pixel covered at the source resolution escapes the projection.
    pub fn project(&self, width: usize, height: usize) -> PixelMask {
        let mut nearest = vec![false; width * height];
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                nearest[y * width + x] = self.get(sx.min(self.width - 1), sy.min(self.height - 1));
            }
        }
        let mut bits = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                if !nearest[y * width + x] {
                    continue;
                }
                for ny in y.saturating_sub(1)..=(y + 1).min(height - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(width - 1) {
                        bits[ny * width + nx] = true;
                    }
                }
            }
        }
        PixelMask { width, height, bits }
    }
}

/// Bilinear resampling of a single-channel plane with half-pixel centres and
/// clamped borders.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    assert_eq!(src.len(), sw * sh, "source plane size");
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let axis = |d: usize, s: usize, n_dst: usize| {
        let pos = ((d as f64 + 0.5) * s as f64 / n_dst as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..dw).map(|x| axis(x, sw, dw)).collect();
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = axis(y, sh, dh);
        for &(x0, x1, fx) in &cols {
            let top = src[y0 * sw + x0] as f64 * (1.0 - fx) + src[y0 * sw + x1] as f64 * fx;
            let bottom = src[y1 * sw + x0] as f64 * (1.0 - fx) + src[y1 * sw + x1] as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}
