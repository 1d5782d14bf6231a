//! SLIC superpixels: k-means in joint CIELAB + image-plane space, searched
//! within a window around each centre, followed by connectivity enforcement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::connectivity::RegionGraph;
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::segmentation::LabelMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlicParams {
    pub n_segments: usize,
    /// Weight of spatial distance against CIELAB distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_segments: 25,
            compactness: 1.0,
            iterations: 10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB in `[0, 1]` to CIELAB under D65.
pub(crate) fn rgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| srgb_to_linear(c as f64));
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = (0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > 0.008_856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lab_dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Rows and columns of the initial centre lattice, with `rows * cols <= n`.
fn lattice(n: usize, width: usize, height: usize) -> (usize, usize) {
    let rows = ((n as f64 * height as f64 / width as f64).sqrt().round() as usize).clamp(1, n);
    let cols = (n / rows).max(1);
    (rows, cols)
}

pub fn slic_segment(image: &ImageRgb, params: &SlicParams, seed: u64) -> Result<LabelMap> {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    if params.n_segments < 2 {
        return Err(Error::InvalidSegmentation("SLIC needs at least 2 segments".into()));
    }
    if params.n_segments > n {
        return Err(Error::InvalidSegmentation(format!(
            "{} segments requested for {n} pixels",
            params.n_segments
        )));
    }
    if params.compactness.is_nan() || params.compactness <= 0.0 {
        return Err(Error::InvalidSegmentation("compactness must be positive".into()));
    }
    let lab: Vec<[f64; 3]> = (0..n).map(|i| rgb_to_lab(image.pixel_at(i))).collect();
    let (rows, cols) = lattice(params.n_segments, w, h);
    let step_x = w as f64 / cols as f64;
    let step_y = h as f64 / rows as f64;
    let step = (n as f64 / params.n_segments as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let jx = rng.random_range(-0.1..=0.1) * step_x;
            let jy = rng.random_range(-0.1..=0.1) * step_y;
            let x = ((c as f64 + 0.5) * step_x + jx).clamp(0.0, (w - 1) as f64);
            let y = ((r as f64 + 0.5) * step_y + jy).clamp(0.0, (h - 1) as f64);
            let (x, y) = lowest_gradient(&lab, w, h, x.round() as usize, y.round() as usize);
            centers.push(Center {
                lab: lab[y * w + x],
                x: x as f64,
                y: y as f64,
            });
        }
    }

    let spatial_weight = (params.compactness / step).powi(2);
    let radius = step.ceil() as isize;
    let mut assignment = vec![usize::MAX; n];
    let mut distance = vec![f64::INFINITY; n];
    for _ in 0..params.iterations.max(1) {
        distance.fill(f64::INFINITY);
        for (k, center) in centers.iter().enumerate() {
            let (cx, cy) = (center.x.round() as isize, center.y.round() as isize);
            let y0 = (cy - radius).max(0) as usize;
            let y1 = ((cy + radius) as usize).min(h - 1);
            let x0 = (cx - radius).max(0) as usize;
            let x1 = ((cx + radius) as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let ds = (x as f64 - center.x).powi(2) + (y as f64 - center.y).powi(2);
                    let d = lab_dist2(&lab[p], &center.lab) + ds * spatial_weight;
                    if d < distance[p] {
                        distance[p] = d;
                        assignment[p] = k;
                    }
                }
            }
        }
        for p in 0..n {
            if assignment[p] == usize::MAX {
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                assignment[p] = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da = lab_dist2(&lab[p], &centers[a].lab)
                            + ((x - centers[a].x).powi(2) + (y - centers[a].y).powi(2)) * spatial_weight;
                        let db = lab_dist2(&lab[p], &centers[b].lab)
                            + ((x - centers[b].x).powi(2) + (y - centers[b].y).powi(2)) * spatial_weight;
                        da.total_cmp(&db)
                    })
                    .expect("at least one centre");
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for p in 0..n {
            let s = &mut sums[assignment[p]];
            s[0] += lab[p][0];
            s[1] += lab[p][1];
            s[2] += lab[p][2];
            s[3] += (p % w) as f64;
            s[4] += (p / w) as f64;
            s[5] += 1.0;
        }
        for (center, s) in centers.iter_mut().zip(&sums) {
            if s[5] > 0.0 {
                center.lab = [s[0] / s[5], s[1] / s[5], s[2] / s[5]];
                center.x = s[3] / s[5];
                center.y = s[4] / s[5];
            }
        }
    }

    let mut graph = RegionGraph::new(w, h, &assignment);
    graph.merge_small((n / (4 * params.n_segments)).max(1));
    graph.merge_down_to(params.n_segments);
    LabelMap::new(w, h, graph.labels())
}

/// Moves a seed to the lowest-gradient pixel of its 3x3 neighbourhood.
fn lowest_gradient(lab: &[[f64; 3]], w: usize, h: usize, x: usize, y: usize) -> (usize, usize) {
    let gradient = |x: usize, y: usize| {
        let at = |x: usize, y: usize| &lab[y.min(h - 1) * w + x.min(w - 1)];
        lab_dist2(at(x + 1, y), at(x.saturating_sub(1), y)) + lab_dist2(at(x, y + 1), at(x, y.saturating_sub(1)))
    };
    let mut best = (x, y);
    let mut best_g = gradient(x, y);
    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
            let g = gradient(nx, ny);
            if g < best_g {
                best_g = g;
                best = (nx, ny);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_reference_points() {
        let white = rgb_to_lab([1.0; 3]);
        assert!((white[0] - 100.0).abs() < 0.01 && white[1].abs() < 0.01 && white[2].abs() < 0.01);
        let black = rgb_to_lab([0.0; 3]);
        assert!(black.iter().all(|v| v.abs() < 1e-9));
        // sRGB red is roughly (53.24, 80.09, 67.20).
        let red = rgb_to_lab([1.0, 0.0, 0.0]);
        assert!((red[0] - 53.24).abs() < 0.05 && (red[1] - 80.09).abs() < 0.1 && (red[2] - 67.20).abs() < 0.1);
    }

    #[test]
    fn uniform_image_gives_lattice_cells() {
        let image = ImageRgb::filled(64, 64, [0.4, 0.5, 0.6]).unwrap();
        let map = slic_segment(&image, &SlicParams::default(), 1).unwrap();
        assert!((20..=25).contains(&map.region_count()), "K = {}", map.region_count());
        assert!(map.is_connected());
        let sizes = map.region_sizes();
        assert!(sizes.iter().all(|&s| s > 64), "{sizes:?}");
    }

    #[test]
    fn respects_a_black_white_boundary() {
        let image = ImageRgb::from_fn(64, 64, |x, _| [if x < 32 { 0.0 } else { 1.0 }; 3]).unwrap();
        let params = SlicParams {
            n_segments: 4,
            ..SlicParams::default()
        };
        let map = slic_segment(&image, &params, 0).unwrap();
        // Every region's minority-side pixels lie within 2 px of the boundary.
        for region in 0..map.region_count() {
            let mut left = Vec::new();
            let mut right = Vec::new();
            for y in 0..64 {
                for x in 0..64 {
                    if map.label(x, y) == region {
                        if x < 32 {
                            left.push(x)
                        } else {
                            right.push(x)
                        }
                    }
                }
            }
            let minority = if left.len() >= right.len() { &right } else { &left };
            assert!(minority
                .iter()
                .all(|&x| (x as isize - 31).abs() <= 2 || (x as isize - 32).abs() <= 2));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let image = ImageRgb::from_fn(48, 40, |x, y| [x as f32 / 48.0, y as f32 / 40.0, 0.3]).unwrap();
        let p = SlicParams::default();
        assert_eq!(
            slic_segment(&image, &p, 5).unwrap(),
            slic_segment(&image, &p, 5).unwrap()
        );
    }

    #[test]
    fn parameter_errors() {
        let image = ImageRgb::filled(8, 8, [0.5; 3]).unwrap();
        let too_many = SlicParams {
            n_segments: 65,
            ..SlicParams::default()
        };
        assert!(slic_segment(&image, &too_many, 0).is_err());
        let flat = SlicParams {
            compactness: 0.0,
            ..SlicParams::default()
        };
        assert!(slic_segment(&image, &flat, 0).is_err());
    }
}
