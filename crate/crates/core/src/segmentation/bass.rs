//! Bayesian Gaussian-mixture superpixels over (location, colour) features.
//!
//! Each component carries a Normal-Inverse-Wishart prior on its mean and
//! covariance and the mixing weights a symmetric Dirichlet prior. Gibbs
//! sampling alternates between drawing every component's parameters and the
//! weights from their conjugate posteriors given the assignments, and drawing
//! every assignment given the parameters.

use nalgebra::{Cholesky, Matrix5, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::connectivity::RegionGraph;
use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::segmentation::{grid_labels, LabelMap};

const DIM: usize = 5;
/// Ridge added to every covariance before factorisation.
const COV_RIDGE: f64 = 1e-6;

/// `(x, y, r, g, b)` for one pixel; locations are scaled to `[0, 1]` by the
/// image size and multiplied by a spatial weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFeature(pub Vector5<f64>);

impl PixelFeature {
    pub fn new(location: [f64; 2], color: [f64; 3]) -> Self {
        Self(Vector5::new(location[0], location[1], color[0], color[1], color[2]))
    }

    pub fn location(&self) -> [f64; 2] {
        [self.0[0], self.0[1]]
    }

    pub fn color(&self) -> [f64; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }
}

pub fn pixel_features(image: &ImageRgb, spatial_weight: f64) -> Vec<PixelFeature> {
    let (w, h) = (image.width(), image.height());
    (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            let rgb = image.pixel_at(i);
            PixelFeature::new(
                [
                    (x as f64 + 0.5) / w as f64 * spatial_weight,
                    (y as f64 + 0.5) / h as f64 * spatial_weight,
                ],
                rgb.map(f64::from),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BassParams {
    pub init_components: usize,
    /// Symmetric Dirichlet concentration.
    pub alpha: f64,
    pub sweeps: usize,
    pub spatial_weight: f64,
    pub kappa0: f64,
    pub nu0: f64,
    /// Prior scale matrix = `psi_scale * diag(feature variance)`.
    pub psi_scale: f64,
    /// Connected pieces smaller than this fraction of the image are absorbed.
    pub min_region_fraction: f64,
}

impl Default for BassParams {
    fn default() -> Self {
        Self {
            init_components: 25,
            alpha: 1.0,
            sweeps: 100,
            spatial_weight: 1.0,
            kappa0: 0.1,
            nu0: 10.0,
            psi_scale: 0.1,
            min_region_fraction: 0.0025,
        }
    }
}

/// Normal-Inverse-Wishart hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwPrior {
    pub mean: Vector5<f64>,
    pub kappa: f64,
    pub nu: f64,
    pub scale: Matrix5<f64>,
}

#[derive(Debug, Clone, Default)]
struct SufficientStats {
    n: usize,
    sum: Vector5<f64>,
    outer: Matrix5<f64>,
}

impl NiwPrior {
    /// Weakly informative prior centred on the data: mean at the feature
    /// mean, scale matrix `psi_scale * diag(variance)` floored at the ridge.
    pub fn from_features(features: &[PixelFeature], kappa: f64, nu: f64, psi_scale: f64) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidSegmentation("no pixels".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(kappa) || !positive(psi_scale) || !(nu.is_finite() && nu > (DIM + 1) as f64) {
            return Err(Error::InvalidSegmentation(format!(
                "NIW prior needs kappa > 0, nu > {}, psi_scale > 0",
                DIM + 1
            )));
        }
        let n = features.len() as f64;
        let mean = features.iter().fold(Vector5::zeros(), |acc, f| acc + f.0) / n;
        let var = features.iter().fold(Vector5::zeros(), |acc: Vector5<f64>, f| {
            acc + (f.0 - mean).component_mul(&(f.0 - mean))
        }) / n;
        let scale = Matrix5::from_diagonal(&var.map(|v| (psi_scale * v).max(COV_RIDGE)));
        Ok(Self { mean, kappa, nu, scale })
    }

    fn posterior(&self, stats: &SufficientStats) -> NiwPrior {
        if stats.n == 0 {
            return self.clone();
        }
        let n = stats.n as f64;
        let xbar = stats.sum / n;
        let scatter = stats.outer - xbar * xbar.transpose() * n;
        let kappa = self.kappa + n;
        let diff = xbar - self.mean;
        let mut scale = self.scale + scatter + diff * diff.transpose() * (self.kappa * n / kappa);
        scale = (scale + scale.transpose()) * 0.5;
        NiwPrior {
            mean: (self.mean * self.kappa + stats.sum) / kappa,
            kappa,
            nu: self.nu + n,
            scale,
        }
    }

    /// Draws `(mu, Sigma)`: `Sigma ~ IW(scale, nu)`, `mu ~ N(mean, Sigma / kappa)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vector5<f64>, Matrix5<f64>) {
        let cov = sample_inverse_wishart(&self.scale, self.nu, rng);
        let (chol, cov) = regularized_cholesky(&cov);
        let z = Vector5::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let mean = self.mean + chol.l() * z / self.kappa.sqrt();
        (mean, cov)
    }
}

/// Bartlett decomposition: `W = C A A^T C^T ~ Wishart(scale^-1, nu)` with
/// `C C^T = scale^-1`, then `Sigma = W^-1`.
fn sample_inverse_wishart<R: Rng + ?Sized>(scale: &Matrix5<f64>, nu: f64, rng: &mut R) -> Matrix5<f64> {
    let (scale_chol, _) = regularized_cholesky(scale);
    let precision = scale_chol.inverse();
    let (c, _) = regularized_cholesky(&precision);
    let c = c.l();
    let mut a = Matrix5::<f64>::zeros();
    for i in 0..DIM {
        let chi = ChiSquared::new(nu - i as f64).expect("nu exceeds dimension");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let ca = c * a;
    let wishart = ca * ca.transpose();
    let (w_chol, _) = regularized_cholesky(&wishart);
    let cov = w_chol.inverse();
    (cov + cov.transpose()) * 0.5
}

/// Cholesky of `cov + ridge * I`, growing the ridge until it succeeds.
fn regularized_cholesky(cov: &Matrix5<f64>) -> (Cholesky<f64, nalgebra::Const<5>>, Matrix5<f64>) {
    let sym = (cov + cov.transpose()) * 0.5;
    let mut ridge = COV_RIDGE;
    loop {
        let candidate = sym + Matrix5::identity() * ridge;
        if let Some(chol) = Cholesky::new(candidate) {
            return (chol, candidate);
        }
        if ridge > 1e6 || !candidate.iter().all(|v| v.is_finite()) {
            let fallback = Matrix5::identity();
            return (Cholesky::new(fallback).unwrap(), fallback);
        }
        ridge *= 10.0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub mean: Vector5<f64>,
    pub cov: Matrix5<f64>,
    pub weight: f64,
}

/// Mixture parameters, hyperparameters and assignments of one Gibbs chain.
#[derive(Debug, Clone)]
pub struct GmmState {
    pub components: Vec<Component>,
    pub assignments: Vec<usize>,
    pub prior: NiwPrior,
    pub alpha: f64,
}

impl GmmState {
    pub fn new(prior: NiwPrior, alpha: f64, assignments: Vec<usize>, components: usize) -> Result<Self> {
        if components == 0 || assignments.iter().any(|&z| z >= components) {
            return Err(Error::InvalidSegmentation(
                "assignment outside the component range".into(),
            ));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidSegmentation(
                "Dirichlet concentration must be positive".into(),
            ));
        }
        let expected_cov = prior.scale / (prior.nu - DIM as f64 - 1.0);
        let components = (0..components)
            .map(|_| Component {
                mean: prior.mean,
                cov: expected_cov,
                weight: 1.0 / components as f64,
            })
            .collect();
        Ok(Self {
            components,
            assignments,
            prior,
            alpha,
        })
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.components.len()];
        for &z in &self.assignments {
            counts[z] += 1;
        }
        counts
    }

    pub fn occupied(&self) -> usize {
        self.counts().iter().filter(|&&c| c > 0).count()
    }

    /// One Gibbs sweep: parameters and weights given assignments, then
    /// assignments given parameters and weights. Empty components draw their
    /// parameters from the prior.
    pub fn sweep<R: Rng + ?Sized>(&mut self, features: &[PixelFeature], rng: &mut R) {
        assert_eq!(features.len(), self.assignments.len(), "one feature per assignment");
        let k = self.components.len();
        let mut stats = vec![SufficientStats::default(); k];
        for (f, &z) in features.iter().zip(&self.assignments) {
            let s = &mut stats[z];
            s.n += 1;
            s.sum += f.0;
            s.outer += f.0 * f.0.transpose();
        }

        for (component, s) in self.components.iter_mut().zip(&stats) {
            let (mean, cov) = self.prior.posterior(s).sample(rng);
            component.mean = mean;
            component.cov = cov;
        }

        let gammas: Vec<f64> = stats
            .iter()
            .map(|s| {
                Gamma::new(self.alpha + s.n as f64, 1.0)
                    .unwrap()
                    .sample(rng)
                    .max(f64::MIN_POSITIVE)
            })
            .collect();
        let total: f64 = gammas.iter().sum();
        for (component, g) in self.components.iter_mut().zip(gammas) {
            component.weight = g / total;
        }

        let densities: Vec<LogDensity> = self.components.iter().map(LogDensity::new).collect();
        let mut log_p = vec![0.0f64; k];
        for (f, z) in features.iter().zip(self.assignments.iter_mut()) {
            let mut max = f64::NEG_INFINITY;
            for (lp, d) in log_p.iter_mut().zip(&densities) {
                *lp = d.eval(&f.0);
                max = max.max(*lp);
            }
            let mut total = 0.0;
            for lp in log_p.iter_mut() {
                let diff = *lp - max;
                *lp = if diff < -50.0 { 0.0 } else { diff.exp() };
                total += *lp;
            }
            let mut u = rng.random::<f64>() * total;
            let mut chosen = k - 1;
            for (j, &p) in log_p.iter().enumerate() {
                if u < p {
                    chosen = j;
                    break;
                }
                u -= p;
            }
            *z = chosen;
        }
    }
}

/// `log(weight * N(x | mean, cov))` up to the shared `2 pi` constant.
struct LogDensity {
    mean: [f64; DIM],
    /// Row-major inverse Cholesky factor (lower triangular).
    inv_l: [[f64; DIM]; DIM],
    offset: f64,
}

impl LogDensity {
    fn new(c: &Component) -> Self {
        let (chol, _) = regularized_cholesky(&c.cov);
        let l = chol.l();
        let log_det_half: f64 = (0..DIM).map(|i| l[(i, i)].ln()).sum();
        let inv = l
            .solve_lower_triangular(&Matrix5::identity())
            .unwrap_or_else(Matrix5::identity);
        let mut inv_l = [[0.0; DIM]; DIM];
        for (i, row) in inv_l.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate().take(i + 1) {
                *v = inv[(i, j)];
            }
        }
        let log_w = if c.weight > 0.0 {
            c.weight.ln()
        } else {
            f64::NEG_INFINITY
        };
        Self {
            mean: [c.mean[0], c.mean[1], c.mean[2], c.mean[3], c.mean[4]],
            inv_l,
            offset: log_w - log_det_half,
        }
    }

    #[inline]
    fn eval(&self, x: &Vector5<f64>) -> f64 {
        let d = [
            x[0] - self.mean[0],
            x[1] - self.mean[1],
            x[2] - self.mean[2],
            x[3] - self.mean[3],
            x[4] - self.mean[4],
        ];
        let mut maha = 0.0;
        for (i, row) in self.inv_l.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..=i {
                s += row[j] * d[j];
            }
            maha += s * s;
        }
        self.offset - 0.5 * maha
    }
}

/// Near-square `rows x cols` factorisation of `k` (rows <= cols).
fn grid_shape(k: usize) -> (usize, usize) {
    let mut rows = (k as f64).sqrt().floor() as usize;
    while rows > 1 && !k.is_multiple_of(rows) {
        rows -= 1;
    }
    (rows.max(1), k / rows.max(1))
}

/// Runs the Gibbs chain from a regular-grid initialisation and returns the
/// raw assignments.
pub(crate) fn run_chain(image: &ImageRgb, params: &BassParams, seed: u64) -> Result<GmmState> {
    if params.init_components < 2 {
        return Err(Error::InvalidSegmentation("need at least 2 initial components".into()));
    }
    if params.sweeps == 0 {
        return Err(Error::InvalidSegmentation("need at least one Gibbs sweep".into()));
    }
    if !(params.spatial_weight.is_finite() && params.spatial_weight > 0.0) {
        return Err(Error::InvalidSegmentation("spatial weight must be positive".into()));
    }
    let features = pixel_features(image, params.spatial_weight);
    let prior = NiwPrior::from_features(&features, params.kappa0, params.nu0, params.psi_scale)?;
    let (rows, cols) = grid_shape(params.init_components);
    let init = grid_labels(
        image.width(),
        image.height(),
        rows.min(image.height()),
        cols.min(image.width()),
    )?;
    let assignments = init.labels().iter().map(|&l| l as usize).collect();
    let mut state = GmmState::new(prior, params.alpha, assignments, init.region_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..params.sweeps {
        state.sweep(&features, &mut rng);
    }
    Ok(state)
}

pub fn bass_segment(image: &ImageRgb, params: &BassParams, seed: u64) -> Result<LabelMap> {
    let state = run_chain(image, params, seed)?;
    let (w, h) = (image.width(), image.height());
    let min_size = (params.min_region_fraction * (w * h) as f64).ceil() as usize;
    let mut graph = RegionGraph::new(w, h, &state.assignments);
    graph.merge_small(min_size);
    // Spatial fragments of one component become separate regions, but never
    // more regions than components survived the chain.
    graph.merge_down_to(state.occupied());
    LabelMap::new(w, h, graph.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clouds(n: usize, seed: u64) -> (Vec<PixelFeature>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let center = if label == 0 { 0.0 } else { 5.0 };
            let v = Vector5::from_fn(|_, _| center + 0.1 * rng.sample::<f64, _>(StandardNormal));
            features.push(PixelFeature(v));
            truth.push(label);
        }
        (features, truth)
    }

    #[test]
    fn single_component_stays_put_and_tracks_the_mean() {
        let (features, _) = two_clouds(2000, 1);
        let prior = NiwPrior::from_features(&features, 0.1, 10.0, 0.1).unwrap();
        let mut state = GmmState::new(prior, 1.0, vec![0; features.len()], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            state.sweep(&features, &mut rng);
            assert!(state.assignments.iter().all(|&z| z == 0));
            assert!((state.components[0].weight - 1.0).abs() < 1e-12);
        }
        let sample_mean = features.iter().fold(Vector5::zeros(), |a, f| a + f.0) / features.len() as f64;
        assert!((state.components[0].mean - sample_mean).amax() < 0.2);
    }

    #[test]
    fn separates_well_separated_clouds() {
        let (features, truth) = two_clouds(1000, 3);
        let prior = NiwPrior::from_features(&features, 0.1, 10.0, 0.1).unwrap();
        let init = (0..features.len()).map(|i| (i / 2) % 2).collect();
        let mut state = GmmState::new(prior, 1.0, init, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            state.sweep(&features, &mut rng);
            let total: f64 = state.components.iter().map(|c| c.weight).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(state.components.iter().all(|c| c.weight >= 0.0));
            assert!(state.components.iter().all(|c| Cholesky::new(c.cov).is_some()));
        }
        // Purity: fraction of points whose component's majority label matches theirs.
        let mut table = [[0usize; 2]; 2];
        for (&z, &t) in state.assignments.iter().zip(&truth) {
            table[z][t] += 1;
        }
        let pure: usize = table.iter().map(|row| row[0].max(row[1])).sum();
        assert!(pure as f64 / truth.len() as f64 >= 0.99, "{table:?}");
    }

    #[test]
    fn inverse_wishart_mean_matches_closed_form() {
        let scale = Matrix5::from_diagonal(&Vector5::new(1.0, 2.0, 0.5, 0.25, 3.0));
        let nu = 12.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4000;
        let mut acc = Matrix5::zeros();
        for _ in 0..n {
            acc += sample_inverse_wishart(&scale, nu, &mut rng);
        }
        let mean = acc / n as f64;
        let expected = scale / (nu - DIM as f64 - 1.0);
        for i in 0..DIM {
            let rel = (mean[(i, i)] - expected[(i, i)]).abs() / expected[(i, i)];
            assert!(rel < 0.05, "diag {i}: {} vs {}", mean[(i, i)], expected[(i, i)]);
        }
    }

    #[test]
    fn log_density_matches_direct_formula() {
        let a = Matrix5::from_fn(|i, j| if i == j { 1.0 + i as f64 } else { 0.1 * (i + j) as f64 });
        let cov = a * a.transpose();
        let c = Component {
            mean: Vector5::new(0.1, 0.2, 0.3, 0.4, 0.5),
            cov,
            weight: 0.3,
        };
        let x = Vector5::new(0.5, -0.2, 1.0, 0.0, 2.0);
        let d = LogDensity::new(&c).eval(&x);
        let reg = cov + Matrix5::identity() * COV_RIDGE;
        let diff = x - c.mean;
        let maha = (diff.transpose() * reg.try_inverse().unwrap() * diff)[(0, 0)];
        let expected = 0.3f64.ln() - 0.5 * reg.determinant().ln() - 0.5 * maha;
        assert!((d - expected).abs() < 1e-9, "{d} vs {expected}");
    }

    #[test]
    fn grid_shape_is_near_square() {
        assert_eq!(grid_shape(25), (5, 5));
        assert_eq!(grid_shape(8), (2, 4));
        assert_eq!(grid_shape(7), (1, 7));
    }

    #[test]
    fn rejects_bad_parameters() {
        let image = ImageRgb::filled(16, 16, [0.5; 3]).unwrap();
        let p = BassParams {
            init_components: 1,
            ..BassParams::default()
        };
        assert!(bass_segment(&image, &p, 0).is_err());
        let p = BassParams {
            sweeps: 0,
            ..BassParams::default()
        };
        assert!(bass_segment(&image, &p, 0).is_err());
        let p = BassParams {
            nu0: 5.0,
            ..BassParams::default()
        };
        assert!(bass_segment(&image, &p, 0).is_err());
    }
}
