//! Comparison algorithms: fixed-bandwidth mean shift and isotropic
//! variable-bandwidth mean shift with nearest-neighbor bandwidths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::kdtree::KdTree;
use crate::dataset::{build_index, support_candidates, NeighborIndex, PointStore};
use crate::error::{contract, Error, Result};
use crate::geometry::{Bandwidth, KernelProfile, SpdMatrix};
use crate::partition::Partition;
use crate::updates::update_scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardMsConfig {
    /// Kernel scale per domain block (standard deviation).
    pub sigma: Vec<f64>,
    pub delta: f64,
    /// Converged points closer than this share a mode; `None` means `10δ`.
    pub grouping_radius: Option<f64>,
    pub max_iterations: usize,
    pub kernel: KernelProfile,
}

impl StandardMsConfig {
    pub fn new(sigma: Vec<f64>) -> Self {
        Self { sigma, delta: 0.01, grouping_radius: None, max_iterations: 300, kernel: KernelProfile::gaussian() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableMsConfig {
    /// Neighbor rank for the bandwidth heuristic; `None` means `⌈√n⌉`.
    pub k: Option<usize>,
    pub sigma_scale: f64,
    /// Convergence threshold in normalized units.
    pub delta: f64,
    /// Grouping radius in normalized units; `None` means `10δ`.
    pub grouping_radius: Option<f64>,
    /// Variance floor in normalized units.
    pub xi: f64,
    pub max_iterations: usize,
    pub kernel: KernelProfile,
}

impl Default for VariableMsConfig {
    fn default() -> Self {
        Self {
            k: None,
            sigma_scale: 1.0,
            delta: 1e-3,
            grouping_radius: None,
            xi: 1e-6,
            max_iterations: 300,
            kernel: KernelProfile::gaussian(),
        }
    }
}

/// Converged location of every point plus the iterations it took.
#[derive(Debug, Clone)]
pub struct Trajectories {
    pub dim: usize,
    pub endpoints: Vec<f64>,
    pub iterations: Vec<usize>,
}

/// Groups endpoints lying within `radius` of each other (single linkage).
/// Returns per-point group keys and the mean endpoint of each group.
pub fn group_endpoints(endpoints: &[f64], dim: usize, radius: f64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let n = endpoints.len() / dim;
    let tree = KdTree::build(endpoints, dim);
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for (j, _) in tree.within_radius(&endpoints[i * dim..(i + 1) * dim], radius) {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let (labels, order) = crate::partition::compact_labels(&roots);
    let mut modes = vec![vec![0.0; dim]; order.len()];
    let mut counts = vec![0usize; order.len()];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (m, v) in modes[l].iter_mut().zip(&endpoints[i * dim..(i + 1) * dim]) {
            *m += v;
        }
    }
    for (m, &c) in modes.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    (labels, modes)
}

/// First fixed-bandwidth mean-shift vector of every point.
pub fn standard_first_shifts(store: &PointStore, sigma: &[f64], profile: &KernelProfile) -> Result<Vec<f64>> {
    let index = build_index(store);
    let half: Vec<f64> = sigma.iter().map(|s| s * profile.support_radius).collect();
    let shifts: Vec<Vec<f64>> = (0..store.len())
        .into_par_iter()
        .map(|i| {
            let x = store.point(i);
            let f = update_scalar(x, store, &support_candidates(&index, x, &half), sigma, profile)?;
            Ok(f.iter().zip(x).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    Ok(shifts.concat())
}

fn standard_trajectory(
    store: &PointStore,
    index: &NeighborIndex,
    start: &[f64],
    config: &StandardMsConfig,
) -> Result<(Vec<f64>, usize)> {
    let half: Vec<f64> = config.sigma.iter().map(|s| s * config.kernel.support_radius).collect();
    let mut x = start.to_vec();
    for it in 1..=config.max_iterations {
        let cand = support_candidates(index, &x, &half);
        let next = match update_scalar(&x, store, &cand, &config.sigma, &config.kernel) {
            Ok(f) => f,
            Err(Error::Isolated) => return Ok((x, it)),
            Err(e) => return Err(e),
        };
        let m = next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        x = next;
        if m <= config.delta {
            return Ok((x, it));
        }
    }
    Ok((x, config.max_iterations))
}

/// Runs every point to convergence independently under the fixed bandwidth.
pub fn standard_trajectories(store: &PointStore, config: &StandardMsConfig) -> Result<Trajectories> {
    if config.sigma.len() != store.domains().block_count() {
        return Err(Error::DimensionMismatch { expected: store.domains().block_count(), got: config.sigma.len() });
    }
    if config.sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(contract("sigma must be positive"));
    }
    let index = build_index(store);
    let out: Vec<(Vec<f64>, usize)> = (0..store.len())
        .into_par_iter()
        .map(|i| standard_trajectory(store, &index, store.point(i), config))
        .collect::<Result<_>>()?;
    let (ends, iterations): (Vec<Vec<f64>>, Vec<usize>) = out.into_iter().unzip();
    Ok(Trajectories { dim: store.dim(), endpoints: ends.concat(), iterations })
}

pub fn run_standard_ms(store: &PointStore, config: &StandardMsConfig) -> Result<Partition> {
    let traj = standard_trajectories(store, config)?;
    let radius = config.grouping_radius.unwrap_or(10.0 * config.delta);
    let (labels, modes) = group_endpoints(&traj.endpoints, traj.dim, radius);
    let variances: Vec<f64> = config.sigma.iter().map(|s| s * s).collect();
    let bw = Bandwidth::isotropic(store.domains(), &variances)?;
    Ok(Partition::from_keys(&labels, |k| (modes[k].clone(), bw.clone())))
}

/// Per-dimension affine map onto `[0, 1]`; constant dimensions keep unit scale.
#[derive(Debug, Clone)]
pub struct RangeNormalizer {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl RangeNormalizer {
    pub fn fit(data: &[f64], dim: usize) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in data.chunks(dim) {
            for k in 0..dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let scale = lo.iter().zip(&hi).map(|(l, h)| if h > l { h - l } else { 1.0 }).collect();
        Self { offset: lo, scale }
    }

    pub fn forward(&self, data: &[f64]) -> Vec<f64> {
        let d = self.offset.len();
        data.iter().enumerate().map(|(i, v)| (v - self.offset[i % d]) / self.scale[i % d]).collect()
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, v)| v * self.scale[k] + self.offset[k]).collect()
    }
}

/// `σ_i = scale · ‖x_i − x_i^k‖`, floored at `√ξ`.
pub fn knn_bandwidths(data: &[f64], dim: usize, k: usize, scale: f64, xi: f64) -> Result<Vec<f64>> {
    let n = data.len() / dim;
    if k == 0 || k >= n {
        return Err(contract(format!("neighbor rank {k} needs 0 < k < n = {n}")));
    }
    let tree = KdTree::build(data, dim);
    let floor = xi.sqrt();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let nn = tree.k_nearest(&data[i * dim..(i + 1) * dim], k + 1);
            // the query point itself is among the k+1 nearest
            let d2 = nn.iter().filter(|&&(j, _)| j != i).nth(k - 1).map(|&(_, d)| d).unwrap_or(0.0);
            (scale * d2.sqrt()).max(floor)
        })
        .collect())
}

/// One sample-point estimator step with isotropic per-point bandwidths.
pub fn variable_step(
    x: &[f64],
    data: &[f64],
    dim: usize,
    sigmas: &[f64],
    candidates: &[usize],
    profile: &KernelProfile,
) -> Result<Vec<f64>> {
    let mut num = vec![0.0; dim];
    let mut den = 0.0;
    for &i in candidates {
        let p = &data[i * dim..(i + 1) * dim];
        let s2 = sigmas[i] * sigmas[i];
        let t = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s2;
        let w = profile.weight(t);
        if w == 0.0 {
            continue;
        }
        // |Σ_i|^{-1/2} Σ_i^{-1} = σ_i^{-(d+2)}
        let c = w * sigmas[i].powi(-(dim as i32 + 2));
        den += c;
        for (acc, v) in num.iter_mut().zip(p) {
            *acc += c * v;
        }
    }
    if !(den > 0.0) {
        return Err(Error::Isolated);
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// Variable-bandwidth mean shift in range-normalized coordinates.
pub fn run_variable_ms(store: &PointStore, config: &VariableMsConfig) -> Result<Partition> {
    let n = store.len();
    let dim = store.dim();
    let norm = RangeNormalizer::fit(store.data(), dim);
    let data = norm.forward(store.data());
    let k = config.k.unwrap_or(((n as f64).sqrt().ceil() as usize).min(n.saturating_sub(1)).max(1));
    let sigmas = knn_bandwidths(&data, dim, k, config.sigma_scale, config.xi)?;
    let reach = config.kernel.support_radius * sigmas.iter().cloned().fold(0.0, f64::max);
    let tree = KdTree::build(&data, dim);
    let ends: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut x = data[i * dim..(i + 1) * dim].to_vec();
            for _ in 0..config.max_iterations {
                let cand: Vec<usize> = tree.within_radius(&x, reach).into_iter().map(|(j, _)| j).collect();
                let next = match variable_step(&x, &data, dim, &sigmas, &cand, &config.kernel) {
                    Ok(f) => f,
                    Err(Error::Isolated) => break,
                    Err(e) => return Err(e),
                };
                let m = next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                x = next;
                if m <= config.delta {
                    break;
                }
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    let radius = config.grouping_radius.unwrap_or(10.0 * config.delta);
    let (labels, modes) = group_endpoints(&ends.concat(), dim, radius);
    let mut var = vec![0.0; modes.len()];
    let mut count = vec![0usize; modes.len()];
    for (i, &l) in labels.iter().enumerate() {
        var[l] += sigmas[i] * sigmas[i];
        count[l] += 1;
    }
    Ok(Partition::from_keys(&labels, |l| {
        let s2 = var[l] / count[l] as f64;
        let diag: Vec<f64> = norm.scale.iter().map(|c| s2 * c * c).collect();
        let bw = Bandwidth::single(SpdMatrix::from_diagonal(&diag).expect("positive diagonal"));
        (norm.inverse(&modes[l]), bw)
    }))
}
