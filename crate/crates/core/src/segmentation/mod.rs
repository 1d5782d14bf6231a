//! Partitioning an image into disjoint, contiguous subobject regions.

mod bass;
mod connectivity;
mod grid;
mod slic;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

pub use bass::{bass_segment, pixel_features, BassParams, Component, GmmState, NiwPrior, PixelFeature};
pub use connectivity::enforce_connectivity;
pub use grid::{grid_labels, grid_segment};
pub use slic::{slic_segment, SlicParams};

use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, PixelMask};

/// Per-pixel region labels `0..K`, every region nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    regions: usize,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::InvalidLabels(format!(
                "{width}x{height} needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        let regions = *labels.iter().max().unwrap() as usize + 1;
        let mut seen = vec![false; regions];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidLabels(format!("region {missing} of {regions} is empty")));
        }
        Ok(Self {
            width,
            height,
            labels,
            regions,
        })
    }

    /// Renumbers arbitrary labels by first appearance in row-major order.
    pub fn from_raw(width: usize, height: usize, raw: &[usize]) -> Result<Self> {
        let mut remap = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|&l| {
                let next = remap.len() as u32;
                *remap.entry(l).or_insert(next)
            })
            .collect();
        Self::new(width, height, labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn region_count(&self) -> usize {
        self.regions
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.regions];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Pixels belonging to any of `regions`.
    pub fn mask(&self, regions: &[usize]) -> PixelMask {
        let mut selected = vec![false; self.regions];
        for &r in regions {
            if r < self.regions {
                selected[r] = true;
            }
        }
        let bits = self.labels.iter().map(|&l| selected[l as usize]).collect();
        PixelMask::from_bits(self.width, self.height, bits).expect("label map dimensions")
    }

    /// True when every region is a single 4-connected component.
    pub fn is_connected(&self) -> bool {
        let raw: Vec<usize> = self.labels.iter().map(|&l| l as usize).collect();
        let split = enforce_connectivity(self.width, self.height, &raw, 0);
        split.iter().max().map_or(0, |&m| m as usize + 1) == self.regions
    }

    /// Nearest-neighbour resampling to another resolution (labels may vanish
    /// when shrinking; the result is renumbered).
    pub fn resize_nearest(&self, width: usize, height: usize) -> Result<LabelMap> {
        let mut raw = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                raw.push(self.labels[sy * self.width + sx] as usize);
            }
        }
        LabelMap::from_raw(width, height, &raw)
    }

    /// 16-bit grayscale PNG, one gray level per region.
    pub fn save_png16(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.regions > u16::MAX as usize + 1 {
            return Err(Error::InvalidLabels(format!(
                "{} regions do not fit 16 bits",
                self.regions
            )));
        }
        let raw: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        let buffer: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer matches dimensions");
        buffer.save(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png16(path: impl AsRef<Path>) -> Result<LabelMap> {
        let path = path.as_ref();
        let decoded = image::open(path)
            .map_err(|source| Error::Decode {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma16();
        let (w, h) = decoded.dimensions();
        let labels = decoded.into_raw().into_iter().map(u32::from).collect();
        LabelMap::new(w as usize, h as usize, labels)
    }
}

/// Fraction of pixels labelled correctly when every predicted region is
/// mapped to the ground-truth label it overlaps most (many-to-one matching).
pub fn majority_agreement(predicted: &LabelMap, truth: &[usize]) -> f64 {
    assert_eq!(predicted.labels.len(), truth.len(), "label maps must share a shape");
    let classes = truth.iter().max().map_or(1, |&m| m + 1);
    let mut overlap = vec![vec![0usize; classes]; predicted.regions];
    for (&p, &t) in predicted.labels.iter().zip(truth) {
        overlap[p as usize][t] += 1;
    }
    let correct: usize = overlap.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    correct as f64 / truth.len() as f64
}

/// How to segment an image; serialised with a `method` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum SegmenterConfig {
    Grid { rows: usize, cols: usize },
    Slic(SlicParams),
    Bass(BassParams),
}

impl SegmenterConfig {
    pub fn name(&self) -> &'static str {
        match self {
            SegmenterConfig::Grid { .. } => "grid",
            SegmenterConfig::Slic(_) => "slic",
            SegmenterConfig::Bass(_) => "bass",
        }
    }

    pub fn segment(&self, image: &ImageRgb, seed: u64) -> Result<LabelMap> {
        match self {
            SegmenterConfig::Grid { rows, cols } => grid_segment(image, *rows, *cols),
            SegmenterConfig::Slic(p) => slic_segment(image, p, seed),
            SegmenterConfig::Bass(p) => bass_segment(image, p, seed),
        }
    }
}

impl fmt::Display for SegmenterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmenterConfig::Grid { rows, cols } => write!(f, "grid:{rows}x{cols}"),
            SegmenterConfig::Slic(p) => write!(f, "slic:{}", p.n_segments),
            SegmenterConfig::Bass(p) => write!(f, "bass:{}", p.init_components),
        }
    }
}

/// Parses `grid[:RxC]`, `slic[:N]` or `bass[:N]`.
impl FromStr for SegmenterConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, arg) = match s.split_once(':') {
            Some((m, a)) => (m, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("bad segmenter spec {s:?}"));
        let count = |a: Option<&str>, default: usize| -> Result<usize> {
            a.map_or(Ok(default), |a| a.parse().map_err(|_| bad()))
        };
        match method {
            "grid" => {
                let (rows, cols) = match arg {
                    Some(a) => {
                        let (r, c) = a.split_once('x').ok_or_else(bad)?;
                        (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?)
                    }
                    None => (5, 5),
                };
                Ok(SegmenterConfig::Grid { rows, cols })
            }
            "slic" => Ok(SegmenterConfig::Slic(SlicParams {
                n_segments: count(arg, SlicParams::default().n_segments)?,
                ..SlicParams::default()
            })),
            "bass" => Ok(SegmenterConfig::Bass(BassParams {
                init_components: count(arg, BassParams::default().init_components)?,
                ..BassParams::default()
            })),
            _ => Err(bad()),
        }
    }
}

/// Reproducibility record written next to a label-map PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMapRecord {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub method: String,
    pub params: SegmenterConfig,
}

impl LabelMapRecord {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
