//! Density-weighted trajectory-set variance as a local bandwidth estimate.

use nalgebra::DMatrix;

use crate::cluster::{Cluster, Phase, TrajectoryMoments};
use crate::error::{contract, Error, Result};
use crate::geometry::{clamp_spd, Bandwidth, Domains, KernelProfile};

#[derive(Debug, Clone)]
pub struct BandwidthEstimate {
    pub sigma: Bandwidth,
    /// Density-weighted trajectory mean.
    pub eta: Vec<f64>,
    pub weight_total: f64,
}

/// Per block `b`: `Σ_b = E_ρ[v vᵀ] − η ηᵀ + ξ_b I`, then eigenvalues clamped at `ξ_b`.
pub fn estimate_bandwidth(moments: &TrajectoryMoments, domains: &Domains, xi: &[f64]) -> Result<BandwidthEstimate> {
    if xi.len() != domains.block_count() {
        return Err(Error::DimensionMismatch { expected: domains.block_count(), got: xi.len() });
    }
    if moments.dim() != domains.dim() {
        return Err(Error::DimensionMismatch { expected: domains.dim(), got: moments.dim() });
    }
    if moments.count == 0 || !(moments.w > 0.0) {
        return Err(Error::NoMass);
    }
    let d = moments.dim();
    let w = moments.w;
    let eta: Vec<f64> = moments.wx.iter().map(|v| v / w).collect();
    let mut blocks = Vec::with_capacity(domains.block_count());
    for (range, &floor) in domains.ranges().zip(xi) {
        if !(floor > 0.0) {
            return Err(contract("regularizer must be positive"));
        }
        let k = range.len();
        let mut m = DMatrix::zeros(k, k);
        for (a, i) in range.clone().enumerate() {
            for (b, j) in range.clone().enumerate().skip(a) {
                let v = moments.wxx[i * d + j] / w - eta[i] * eta[j];
                m[(a, b)] = v;
                m[(b, a)] = v;
            }
            m[(a, a)] += floor;
        }
        blocks.push(clamp_spd(&m, floor)?);
    }
    Ok(BandwidthEstimate { sigma: Bandwidth::from_blocks(blocks), eta, weight_total: w })
}

/// How a cluster's bandwidth estimate is deemed trustworthy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// Effective sample size at least this value.
    Ess(f64),
    /// At least this many members.
    Size(usize),
}

/// Member-count gate for dense joint-domain data: the squared size of the
/// largest domain block.
pub fn dense_size_threshold(domains: &Domains) -> usize {
    let m = domains.sizes().iter().copied().max().unwrap_or(1);
    m * m
}

/// Refreshes the cluster's ESS and replaces its bandwidth when the gate passes.
/// Returns whether the bandwidth was replaced.
pub fn maybe_update_bandwidth(
    cluster: &mut Cluster,
    domains: &Domains,
    xi: &[f64],
    gate: Gate,
    profile: &KernelProfile,
) -> Result<bool> {
    let est = match estimate_bandwidth(&cluster.moments, domains, xi) {
        Ok(est) => est,
        Err(Error::NoMass) => return Ok(false),
        Err(e) => return Err(e),
    };
    cluster.ess = cluster.effective_sample_size(&est.sigma, profile);
    let pass = match gate {
        Gate::Ess(lambda) => cluster.ess >= lambda,
        Gate::Size(min) => cluster.members.len() >= min,
    };
    if pass {
        cluster.bandwidth = est.sigma;
        cluster.phase = Phase::Anisotropic;
    }
    Ok(pass)
}
