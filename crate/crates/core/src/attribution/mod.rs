//! Per-pixel attribution maps over the classifier input.

mod fullgrad;
mod gradcam;

use std::fs;
use std::path::Path;

use image::GrayImage;
use serde::{Deserialize, Serialize};

pub use fullgrad::{fullgrad, fullgrad_completeness, fullgrad_for_class, Completeness};
pub use gradcam::{default_gradcam_layer, gradcam, gradcam_from_parts};

use crate::error::{Error, Result};
use crate::imaging::resize_bilinear;
use crate::io::quantize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributionMethod {
    FullGrad,
    GradCam,
}

/// Nonnegative saliency at input resolution, normalised so its maximum is 1
/// unless it is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    width: usize,
    height: usize,
    target_class: usize,
    method: AttributionMethod,
    values: Vec<f32>,
}

impl AttributionMap {
    pub fn new(
        width: usize,
        height: usize,
        values: Vec<f32>,
        target_class: usize,
        method: AttributionMethod,
    ) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidTensor(
                "attribution values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            target_class,
            method,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn method(&self) -> AttributionMethod {
        self.method
    }

    /// Shannon entropy (nats) of the map viewed as a distribution over
    /// pixels; `ln(N)` for a flat map. Diagnostic only.
    pub fn entropy(&self) -> f64 {
        let total: f64 = self.values.iter().map(|&v| v as f64).sum();
        if total <= 0.0 {
            return 0.0;
        }
        self.values
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v as f64 / total;
                -p * p.ln()
            })
            .sum()
    }

    pub fn save_heatmap(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = self.values.iter().map(|&v| quantize(v)).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|source| Error::Decode {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Rescales to `[0, 1]`; a constant input becomes all zeros.
pub fn min_max_normalize(values: &mut [f32]) {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    if range.is_nan() || range <= f32::EPSILON * hi.abs().max(1e-30) {
        values.fill(0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = (*v - lo) / range;
    }
}

/// Post-processing of one signed spatial map: absolute value, bilinear
/// upsampling to `out_w x out_h`, then min-max rescaling.
pub fn psi(raw: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let abs: Vec<f32> = raw.iter().map(|v| v.abs()).collect();
    let mut up = resize_bilinear(&abs, width, height, out_w, out_h);
    min_max_normalize(&mut up);
    up
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_hand_computed() {
        let out = psi(&[-2.0, 0.0, 2.0], 3, 1, 3, 1);
        assert_eq!(out, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn psi_constant_map_is_zero() {
        assert!(psi(&[-0.7; 16], 4, 4, 8, 8).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psi_upsampling_keeps_the_peak_cell() {
        let mut raw = vec![0.1f32; 256];
        raw[16 * 5 + 9] = -3.0;
        let out = psi(&raw, 16, 16, 64, 64);
        let arg = crate::tensor::argmax(&out);
        assert_eq!(((arg % 64) / 4, (arg / 64) / 4), (9, 5));
        assert_eq!(out[arg], 1.0);
    }

    #[test]
    fn entropy_of_flat_and_peaked_maps() {
        let flat = AttributionMap::new(4, 4, vec![1.0; 16], 1, AttributionMethod::FullGrad).unwrap();
        assert!((flat.entropy() - 16f64.ln()).abs() < 1e-12);
        let mut v = vec![0.0; 16];
        v[3] = 1.0;
        let peak = AttributionMap::new(4, 4, v, 1, AttributionMethod::FullGrad).unwrap();
        assert_eq!(peak.entropy(), 0.0);
    }

    #[test]
    fn rejects_negative_values() {
        assert!(AttributionMap::new(2, 1, vec![0.5, -0.1], 0, AttributionMethod::GradCam).is_err());
    }
}
