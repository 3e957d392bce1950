//! Seeded Gaussian mixture generator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    /// Row-major covariance (PSD).
    pub covariance: Vec<f64>,
    pub weight: f64,
}

impl Component {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Smallest standard deviation along a principal axis.
    pub fn min_scale(&self) -> f64 {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.covariance);
        SymmetricEigen::new(m).eigenvalues.min().max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<Component>,
}

/// Parameters for [`random_mixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMixture {
    pub components: usize,
    pub dim: usize,
    /// Range of the major-axis standard deviation across components.
    pub scale_range: (f64, f64),
    /// Largest major/minor axis ratio.
    pub max_axis_ratio: f64,
    /// Minimum mean separation in units of the summed major-axis deviations.
    pub separation: f64,
}

impl Default for RandomMixture {
    fn default() -> Self {
        Self { components: 3, dim: 2, scale_range: (0.25, 1.0), max_axis_ratio: 10.0, separation: 2.0 }
    }
}

/// Random rotation via QR of a Gaussian matrix with sign correction.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Draws components with random orientation, log-uniform scales and axis
/// ratios, and means kept apart by rejection.
pub fn random_mixture(params: &RandomMixture, seed: u64) -> Result<Mixture> {
    let (lo, hi) = params.scale_range;
    if params.components == 0 || params.dim == 0 || !(lo > 0.0 && hi >= lo) || !(params.max_axis_ratio >= 1.0) {
        return Err(contract("invalid mixture parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dim;
    let mut shapes = Vec::new();
    for k in 0..params.components {
        // spread the extremes so the full scale range is always present
        let major = if params.components > 1 {
            let t = k as f64 / (params.components - 1) as f64;
            lo * (hi / lo).powf(t)
        } else {
            lo * (hi / lo).powf(rng.random::<f64>())
        };
        let ratio = params.max_axis_ratio.powf(rng.random_range(0.5..=1.0));
        let mut sd = vec![major; d];
        for (i, s) in sd.iter_mut().enumerate().skip(1) {
            *s = major / ratio.powf(i as f64 / (d - 1) as f64);
        }
        let rot = random_rotation(d, &mut rng);
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(d, sd.iter().map(|s| s * s)));
        let cov = &rot * diag * rot.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        shapes.push((major, cov));
    }
    let extent: f64 = shapes.iter().map(|(m, _)| 2.0 * params.separation * m).sum::<f64>();
    let mut means: Vec<Vec<f64>> = Vec::new();
    for (major, _) in &shapes {
        let mut placed = None;
        for _ in 0..10_000 {
            let cand: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..extent)).collect();
            let ok = means.iter().zip(&shapes).all(|(m, (other, _))| {
                let dist = m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                dist >= params.separation * (major + other)
            });
            if ok {
                placed = Some(cand);
                break;
            }
        }
        means.push(placed.ok_or_else(|| contract("could not place separated means"))?);
    }
    let w = 1.0 / params.components as f64;
    let components = means
        .into_iter()
        .zip(shapes)
        .map(|(mean, (_, cov))| Component {
            mean,
            covariance: cov.transpose().as_slice().to_vec(),
            weight: w,
        })
        .collect();
    Ok(Mixture { components })
}

/// Per-component counts by largest remainder.
fn allocate(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..weights.len()).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &k in rest.iter().take(missing) {
        counts[k] += 1;
    }
    counts
}

/// Samples `n` points in shuffled order. Returns row-major points and the
/// generating component of each point.
pub fn sample(mixture: &Mixture, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<usize>)> {
    let first = mixture.components.first().ok_or_else(|| contract("empty mixture"))?;
    let d = first.dim();
    let mut factors = Vec::new();
    for c in &mixture.components {
        if c.dim() != d || c.covariance.len() != d * d || !(c.weight >= 0.0) {
            return Err(contract("inconsistent mixture component"));
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &c.covariance));
        let root = DVector::from_iterator(d, eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
        factors.push(&eig.eigenvectors * DMatrix::from_diagonal(&root));
    }
    let weights: Vec<f64> = mixture.components.iter().map(|c| c.weight).collect();
    if !(weights.iter().sum::<f64>() > 0.0) {
        return Err(contract("mixture weights sum to zero"));
    }
    let mut labels: Vec<usize> = allocate(&weights, n)
        .into_iter()
        .enumerate()
        .flat_map(|(k, c)| std::iter::repeat_n(k, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &k in &labels {
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &factors[k] * z;
        data.extend(mixture.components[k].mean.iter().zip(x.iter()).map(|(m, v)| m + v));
    }
    Ok((data, labels))
}
