//! Seeded planted-patch corpus.
//!
//! Item `i` of a corpus with seed `s` is drawn from a ChaCha8 generator
//! seeded with `s` on stream `i`, in this order: the label draw, the
//! background, then (for unsafe items) the patch. Items are therefore
//! independent of corpus size and of each other, and any consumer holding
//! the seed can regenerate exactly the same files.
//!
//! Safe items are a muted texture with a few low-saturation ellipses.
//! Unsafe items add one saturated ellipse covering 10-25% of the image.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, PixelMask};
use crate::io::{quantized, read_rgb, save_image};
use crate::network::{FLAGGED_CLASS, INPUT_SHAPE, REFERENCE_CLASSES};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PATCH_AREA_RANGE: (f64, f64) = (0.10, 0.25);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub count: usize,
    /// Probability that an item is unsafe.
    pub unsafe_fraction: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 200,
            unsafe_fraction: 0.5,
            width: INPUT_SHAPE[2],
            height: INPUT_SHAPE[1],
        }
    }
}

/// A filled, rotated ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub center: [f64; 2],
    pub radii: [f64; 2],
    /// Rotation in radians.
    pub angle: f64,
    pub color: [f32; 3],
}

impl PatchSpec {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (dx, dy) = (x as f64 + 0.5 - self.center[0], y as f64 + 0.5 - self.center[1]);
        let (sin, cos) = self.angle.sin_cos();
        let u = (dx * cos + dy * sin) / self.radii[0];
        let v = (-dx * sin + dy * cos) / self.radii[1];
        u * u + v * v <= 1.0
    }

    pub fn mask(&self, width: usize, height: usize) -> PixelMask {
        let bits = (0..width * height)
            .map(|i| self.contains(i % width, i / width))
            .collect();
        PixelMask::from_bits(width, height, bits).expect("dimensions match")
    }

    fn paint(&self, pixels: &mut [[f32; 3]], width: usize) {
        for (i, px) in pixels.iter_mut().enumerate() {
            if self.contains(i % width, i / width) {
                *px = self.color;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Safe,
    Unsafe,
}

impl Label {
    pub fn class(self) -> usize {
        match self {
            Label::Safe => 1 - FLAGGED_CLASS,
            Label::Unsafe => FLAGGED_CLASS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub index: usize,
    pub label: Label,
    pub image: ImageRgb,
    pub patch: Option<PatchSpec>,
}

pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Derives an independent per-item seed (splitmix64 finaliser).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_item(spec: &CorpusSpec, index: usize) -> Result<CorpusItem> {
    let mut rng = item_rng(spec.seed, index);
    let label = if rng.random::<f64>() < spec.unsafe_fraction {
        Label::Unsafe
    } else {
        Label::Safe
    };
    let mut pixels = background(&mut rng, spec.width, spec.height);
    let patch = match label {
        Label::Unsafe => Some(random_patch(&mut rng, spec.width, spec.height)),
        Label::Safe => None,
    };
    if let Some(p) = &patch {
        p.paint(&mut pixels, spec.width);
    }
    Ok(CorpusItem {
        index,
        label,
        image: finish(pixels, spec.width, spec.height)?,
        patch,
    })
}

/// The background of a seeded item with an explicit patch painted on top,
/// for tests that need the patch in a known place.
pub fn render_with_patch(seed: u64, width: usize, height: usize, patch: &PatchSpec) -> Result<ImageRgb> {
    let mut rng = item_rng(seed, 0);
    let _label_draw: f64 = rng.random();
    let mut pixels = background(&mut rng, width, height);
    patch.paint(&mut pixels, width);
    finish(pixels, width, height)
}

fn finish(pixels: Vec<[f32; 3]>, width: usize, height: usize) -> Result<ImageRgb> {
    let image = ImageRgb::new(width, height, pixels.into_iter().flatten().collect())?;
    // Items are shipped as 8-bit PNGs; generating the quantised values
    // directly keeps in-memory and on-disk corpora identical.
    Ok(quantized(&image))
}

pub fn hsv_to_rgb(hue: f64, saturation: f64, value: f64) -> [f32; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = value * saturation;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = value - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn muted_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    hsv_to_rgb(
        rng.random_range(0.0..360.0),
        rng.random_range(0.0..0.25),
        rng.random_range(0.3..0.8),
    )
}

fn background(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<[f32; 3]> {
    let base = muted_color(rng);
    let (gx, gy) = (rng.random_range(-0.1..0.1f32), rng.random_range(-0.1..0.1f32));
    let mut pixels: Vec<[f32; 3]> = (0..width * height)
        .map(|i| {
            let (fx, fy) = (
                (i % width) as f32 / width as f32 - 0.5,
                (i / width) as f32 / height as f32 - 0.5,
            );
            base.map(|c| c + gx * fx + gy * fy)
        })
        .collect();
    for _ in 0..rng.random_range(2..=4) {
        let area = rng.random_range(0.02..0.08);
        let color = muted_color(rng);
        let distractor = ellipse(rng, width, height, area, color);
        distractor.paint(&mut pixels, width);
    }
    for px in &mut pixels {
        for c in px.iter_mut() {
            *c = (*c + rng.random_range(-0.03..0.03f32)).clamp(0.0, 1.0);
        }
    }
    pixels
}

fn random_patch(rng: &mut ChaCha8Rng, width: usize, height: usize) -> PatchSpec {
    let area = rng.random_range(PATCH_AREA_RANGE.0..PATCH_AREA_RANGE.1);
    let color = hsv_to_rgb(
        rng.random_range(0.0..360.0),
        rng.random_range(0.85..1.0),
        rng.random_range(0.75..1.0),
    );
    ellipse(rng, width, height, area, color)
}

/// An ellipse of the given area fraction lying fully inside the image.
fn ellipse(rng: &mut ChaCha8Rng, width: usize, height: usize, area: f64, color: [f32; 3]) -> PatchSpec {
    let aspect = rng.random_range(0.6..1.6);
    let angle = rng.random_range(0.0..PI);
    let rx = (area * (width * height) as f64 * aspect / PI).sqrt();
    let ry = rx / aspect;
    let (sin, cos) = angle.sin_cos();
    let ex = (rx * rx * cos * cos + ry * ry * sin * sin)
        .sqrt()
        .min(width as f64 / 2.0);
    let ey = (rx * rx * sin * sin + ry * ry * cos * cos)
        .sqrt()
        .min(height as f64 / 2.0);
    let center = [
        rng.random_range(ex..=width as f64 - ex),
        rng.random_range(ey..=height as f64 - ey),
    ];
    PatchSpec {
        center,
        radii: [rx, ry],
        angle,
        color,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub file: String,
    pub label: Label,
    pub class: usize,
    pub patch: Option<PatchSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub class_names: Vec<String>,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Manifest> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `NNNNN.png` for every item plus `manifest.json`.
pub fn write_corpus(spec: &CorpusSpec, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        let item = generate_item(spec, index)?;
        let file = format!("{index:05}.png");
        save_image(&item.image, dir.join(&file))?;
        items.push(ManifestItem {
            file,
            label: item.label,
            class: item.label.class(),
            patch: item.patch,
        });
    }
    let manifest = Manifest {
        spec: *spec,
        class_names: REFERENCE_CLASSES.iter().map(|s| s.to_string()).collect(),
        items,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A corpus entry on disk.
#[derive(Debug, Clone)]
pub struct LabelledImage {
    pub path: PathBuf,
    pub label: Label,
}

/// Reads a corpus directory: the manifest when present, otherwise every
/// PNG/PPM file, treated as unsafe, in file-name order.
pub fn list_corpus(dir: impl AsRef<Path>) -> Result<Vec<LabelledImage>> {
    let dir = dir.as_ref();
    let entries = if dir.join(MANIFEST_FILE).exists() {
        Manifest::load(dir)?
            .items
            .into_iter()
            .map(|item| LabelledImage {
                path: dir.join(item.file),
                label: item.label,
            })
            .collect()
    } else {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
            })
            .collect();
        paths.sort();
        paths
            .into_iter()
            .map(|path| LabelledImage {
                path,
                label: Label::Unsafe,
            })
            .collect()
    };
    if Vec::is_empty(&entries) {
        return Err(Error::EmptyCorpus(dir.to_path_buf()));
    }
    Ok(entries)
}

pub fn load_labelled(entry: &LabelledImage) -> Result<ImageRgb> {
    read_rgb(&entry.path)
}

/// Two flat colours split by a random straight line; returns the image and
/// the per-pixel side (0 or 1).
pub fn two_color_image(seed: u64, width: usize, height: usize) -> Result<(ImageRgb, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = loop {
        let a: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let b: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let dist: f32 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt();
        if dist >= 0.4 {
            break (a, b);
        }
    };
    let theta = rng.random_range(0.0..2.0 * PI);
    let (ny, nx) = theta.sin_cos();
    let offset = rng.random_range(-0.2..0.2) * width.min(height) as f64;
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let truth: Vec<usize> = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64 + 0.5 - cx, (i / width) as f64 + 0.5 - cy);
            usize::from(x * nx + y * ny > offset)
        })
        .collect();
    let data = truth.iter().flat_map(|&side| if side == 0 { a } else { b }).collect();
    Ok((ImageRgb::new(width, height, data)?, truth))
}
