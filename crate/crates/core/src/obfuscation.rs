//! Masking operators. Pixels outside the mask are never written.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::counterfactual::CounterfactualResult;
use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, PixelMask};
use crate::segmentation::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskOp {
    /// Fill with the classifier's training-set channel means.
    FillChannelMeans {
        means: [f32; 3],
    },
    FillConstant {
        rgb: [f32; 3],
    },
    /// Gaussian blur normalised over the masked pixels only.
    GaussianBlur {
        sigma: f32,
    },
    /// Block averages over the masked pixels of each block.
    Pixelate {
        block: usize,
    },
}

impl MaskOp {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |rgb: &[f32; 3]| rgb.iter().all(|v| (0.0..=1.0).contains(v));
        match self {
            MaskOp::FillChannelMeans { means: rgb } | MaskOp::FillConstant { rgb } if !in_unit(rgb) => {
                Err(Error::InvalidMask(format!("fill {rgb:?} outside [0, 1]")))
            }
            MaskOp::GaussianBlur { sigma } if !(sigma.is_finite() && *sigma > 0.0) => {
                Err(Error::InvalidMask(format!("blur sigma {sigma} must be positive")))
            }
            MaskOp::Pixelate { block } if *block < 2 => {
                Err(Error::InvalidMask(format!("pixelate block {block} must be at least 2")))
            }
            _ => Ok(()),
        }
    }

    /// Fill operators give the same result when applied twice.
    pub fn is_fill(&self) -> bool {
        matches!(self, MaskOp::FillChannelMeans { .. } | MaskOp::FillConstant { .. })
    }
}

pub fn apply_mask(image: &ImageRgb, mask: &PixelMask, op: &MaskOp) -> Result<ImageRgb> {
    op.validate()?;
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::ShapeMismatch {
            expected: vec![image.height(), image.width()],
            actual: vec![mask.height(), mask.width()],
        });
    }
    let mut out = image.clone();
    if mask.is_empty() {
        return Ok(out);
    }
    match op {
        MaskOp::FillChannelMeans { means: rgb } | MaskOp::FillConstant { rgb } => {
            for (i, _) in mask.bits().iter().enumerate().filter(|(_, &m)| m) {
                out.set_pixel_at(i, *rgb);
            }
        }
        MaskOp::GaussianBlur { sigma } => masked_blur(image, mask, *sigma, &mut out),
        MaskOp::Pixelate { block } => masked_pixelate(image, mask, *block, &mut out),
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let s = sigma as f64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * s * s)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.into_iter().map(|k| k / total).collect()
}

/// Separable 1-D pass over `channels` interleaved planes with clamped borders.
fn convolve(src: &[f64], w: usize, h: usize, channels: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (k, &kv) in kernel.iter().enumerate() {
                let offset = k as isize - radius;
                let (sx, sy) = if horizontal {
                    ((x as isize + offset).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + offset).clamp(0, h as isize - 1) as usize)
                };
                let (dst, s) = ((y * w + x) * channels, (sy * w + sx) * channels);
                for c in 0..channels {
                    out[dst + c] += kv * src[s + c];
                }
            }
        }
    }
    out
}

fn masked_blur(image: &ImageRgb, mask: &PixelMask, sigma: f32, out: &mut ImageRgb) {
    let (w, h) = (image.width(), image.height());
    let kernel = gaussian_kernel(sigma);
    // Channels: r*m, g*m, b*m, m.
    let mut stacked = Vec::with_capacity(w * h * 4);
    for (i, &m) in mask.bits().iter().enumerate() {
        let m = if m { 1.0 } else { 0.0 };
        stacked.extend(image.pixel_at(i).map(|v| v as f64 * m));
        stacked.push(m);
    }
    let blurred = convolve(&convolve(&stacked, w, h, 4, &kernel, true), w, h, 4, &kernel, false);
    for (i, _) in mask.bits().iter().enumerate().filter(|(_, &m)| m) {
        let px = &blurred[i * 4..i * 4 + 4];
        out.set_pixel_at(i, [px[0], px[1], px[2]].map(|v| (v / px[3]) as f32));
    }
}

fn masked_pixelate(image: &ImageRgb, mask: &PixelMask, block: usize, out: &mut ImageRgb) {
    let (w, h) = (image.width(), image.height());
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let members: Vec<usize> = (by..(by + block).min(h))
                .flat_map(|y| (bx..(bx + block).min(w)).map(move |x| y * w + x))
                .filter(|&i| mask.bits()[i])
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut sum = [0.0f64; 3];
            for &i in &members {
                for (s, v) in sum.iter_mut().zip(image.pixel_at(i)) {
                    *s += v as f64;
                }
            }
            let mean = sum.map(|s| (s / members.len() as f64) as f32);
            for &i in &members {
                out.set_pixel_at(i, mean);
            }
        }
    }
}

/// Applies `op` to the regions a successful search masked, at the image's
/// own resolution. When the labels were computed on a smaller model view the
/// region mask is projected up (nearest neighbour plus one pixel of dilation).
pub fn render_obfuscated(
    image: &ImageRgb,
    labels: &LabelMap,
    result: &CounterfactualResult,
    op: &MaskOp,
) -> Result<ImageRgb> {
    if !result.success {
        return Err(Error::InvalidMask("only successful searches are rendered".into()));
    }
    let mask = labels.mask(&result.masked_regions);
    let mask = if (image.width(), image.height()) == (labels.width(), labels.height()) {
        mask
    } else {
        mask.project(image.width(), image.height())
    };
    apply_mask(image, &mask, op)
}

/// Textual mask choice, resolved against a model's channel means:
/// `mean`, `black`, `constant:R,G,B`, `blur:SIGMA`, `pixelate:BLOCK`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MaskSpec {
    #[default]
    ChannelMeans,
    Constant([f32; 3]),
    Blur(f32),
    Pixelate(usize),
}

impl MaskSpec {
    pub fn resolve(&self, channel_means: [f32; 3]) -> Result<MaskOp> {
        let op = match *self {
            MaskSpec::ChannelMeans => MaskOp::FillChannelMeans { means: channel_means },
            MaskSpec::Constant(rgb) => MaskOp::FillConstant { rgb },
            MaskSpec::Blur(sigma) => MaskOp::GaussianBlur { sigma },
            MaskSpec::Pixelate(block) => MaskOp::Pixelate { block },
        };
        op.validate()?;
        Ok(op)
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSpec::ChannelMeans => write!(f, "mean"),
            MaskSpec::Constant([r, g, b]) => write!(f, "constant:{r},{g},{b}"),
            MaskSpec::Blur(s) => write!(f, "blur:{s}"),
            MaskSpec::Pixelate(b) => write!(f, "pixelate:{b}"),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad mask spec {s:?}"));
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("mean", None) => Ok(MaskSpec::ChannelMeans),
            ("black", None) => Ok(MaskSpec::Constant([0.0; 3])),
            ("constant", Some(a)) => {
                let values = a
                    .split(',')
                    .map(|v| v.trim().parse::<f32>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                let rgb: [f32; 3] = values.try_into().map_err(|_| bad())?;
                Ok(MaskSpec::Constant(rgb))
            }
            ("blur", Some(a)) => Ok(MaskSpec::Blur(a.parse().map_err(|_| bad())?)),
            ("pixelate", Some(a)) => Ok(MaskSpec::Pixelate(a.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for MaskSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MaskSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
