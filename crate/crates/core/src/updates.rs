//! Fixed-point location updates.
//!
//! All three forms share one weight: the product kernel `J(t_0, t_1, …)` over the
//! domain blocks (which is just `|K'(t)|` for single-domain data).
//!
//! * [`update_scalar`]: fixed isotropic base bandwidth, plain weighted mean.
//! * [`update_partial`]: the cluster's own bandwidth for every neighbor.
//! * [`update_full`]: each neighbor weighted under its owner's bandwidth, with
//!   per-owner precision accumulation and a linear solve.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::cluster::ClusterTable;
use crate::dataset::PointStore;
use crate::error::{contract, Error, Result};
use crate::geometry::{Bandwidth, KernelProfile};

/// Largest acceptable condition estimate of an accumulated precision block.
pub const MAX_CONDITION: f64 = 1e12;

/// Lookup of a neighbor owner's current bandwidth.
pub trait OwnerBandwidths {
    fn bandwidth(&self, owner: usize) -> &Bandwidth;
}

impl OwnerBandwidths for ClusterTable {
    fn bandwidth(&self, owner: usize) -> &Bandwidth {
        &self.get(owner).bandwidth
    }
}

impl OwnerBandwidths for [Bandwidth] {
    fn bandwidth(&self, owner: usize) -> &Bandwidth {
        &self[owner]
    }
}

impl OwnerBandwidths for Vec<Bandwidth> {
    fn bandwidth(&self, owner: usize) -> &Bandwidth {
        &self[owner]
    }
}

impl OwnerBandwidths for BTreeMap<usize, Bandwidth> {
    fn bandwidth(&self, owner: usize) -> &Bandwidth {
        &self[&owner]
    }
}

/// Neighborhood `Ne_x(u)` of a location together with each neighbor's owner.
pub struct NeighborContext<'a, B: OwnerBandwidths + ?Sized> {
    pub store: &'a PointStore,
    pub neighbors: &'a [usize],
    /// Owner cluster of each entry in `neighbors`.
    pub owners: &'a [usize],
    pub bandwidths: &'a B,
}

impl<'a, B: OwnerBandwidths + ?Sized> NeighborContext<'a, B> {
    pub fn new(store: &'a PointStore, neighbors: &'a [usize], owners: &'a [usize], bandwidths: &'a B) -> Self {
        debug_assert_eq!(neighbors.len(), owners.len());
        Self { store, neighbors, owners, bandwidths }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Scalar,
    Partial,
    Full,
}

/// Update selection: scalar until the cluster's own estimate is trusted, full
/// once every neighbor owner's estimate is trusted too, partial in between.
pub fn dispatch(own_confident: bool, owners_confident: impl IntoIterator<Item = bool>) -> UpdateMode {
    if !own_confident {
        UpdateMode::Scalar
    } else if owners_confident.into_iter().all(|c| c) {
        UpdateMode::Full
    } else {
        UpdateMode::Partial
    }
}

/// [`dispatch`] on raw effective sample sizes against threshold `lambda`.
pub fn dispatch_by_ess(ess_u: f64, ess_owners: &[f64], lambda: f64) -> UpdateMode {
    dispatch(ess_u >= lambda, ess_owners.iter().map(|&e| e >= lambda))
}

fn weighted_mean(store: &PointStore, neighbors: &[usize], mut weight: impl FnMut(&[f64]) -> f64) -> Result<Vec<f64>> {
    let d = store.dim();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for &i in neighbors {
        let x = store.point(i);
        let w = weight(x);
        if w > 0.0 {
            den += w;
            for k in 0..d {
                num[k] += w * x[k];
            }
        }
    }
    if !(den > 0.0) {
        return Err(Error::Isolated);
    }
    Ok(num.into_iter().map(|v| v / den).collect())
}

/// Standard mean-shift step with base variances `σ_b²` per domain block.
pub fn update_scalar(
    location: &[f64],
    store: &PointStore,
    neighbors: &[usize],
    sigma_base: &[f64],
    profile: &KernelProfile,
) -> Result<Vec<f64>> {
    let domains = store.domains();
    if sigma_base.len() != domains.block_count() {
        return Err(Error::DimensionMismatch { expected: domains.block_count(), got: sigma_base.len() });
    }
    if neighbors.is_empty() {
        return Err(Error::Isolated);
    }
    let ranges: Vec<_> = domains.ranges().collect();
    let inv_var: Vec<f64> = sigma_base.iter().map(|s| 1.0 / (s * s)).collect();
    let mut t = vec![0.0; ranges.len()];
    weighted_mean(store, neighbors, |x| {
        for (b, r) in ranges.iter().enumerate() {
            t[b] = location[r.clone()]
                .iter()
                .zip(&x[r.clone()])
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                * inv_var[b];
        }
        profile.joint_weight(&t)
    })
}

/// Anisotropic step under the cluster's own bandwidth for every neighbor.
pub fn update_partial(
    location: &[f64],
    bandwidth: &Bandwidth,
    store: &PointStore,
    neighbors: &[usize],
    profile: &KernelProfile,
) -> Result<Vec<f64>> {
    if bandwidth.dim() != store.dim() {
        return Err(Error::DimensionMismatch { expected: store.dim(), got: bandwidth.dim() });
    }
    if neighbors.is_empty() {
        return Err(Error::Isolated);
    }
    let mut t = vec![0.0; bandwidth.blocks().len()];
    weighted_mean(store, neighbors, |x| {
        bandwidth.block_distances(location, x, &mut t);
        profile.joint_weight(&t)
    })
}

/// Linear system `A f = b` assembled by the full update.
#[derive(Debug, Clone)]
pub struct FullSystem {
    pub precision: DMatrix<f64>,
    pub rhs: DVector<f64>,
    /// Block sizes shared by every owner bandwidth.
    pub blocks: Vec<usize>,
}

/// Accumulates `A = Σ_g c_g⁻¹ Σ_g⁻¹ Σ_i w_i` and `b = Σ_g c_g⁻¹ Σ_g⁻¹ Σ_i w_i x_i`,
/// with `w_i` evaluated under the owner's bandwidth and `c_g ∝ |Σ_g|^{1/2}`.
///
/// A common factor is divided out of every `c_g⁻¹`; it cancels in the solve.
pub fn accumulate_full<B: OwnerBandwidths + ?Sized>(
    location: &[f64],
    ctx: &NeighborContext<'_, B>,
    profile: &KernelProfile,
) -> Result<FullSystem> {
    let d = ctx.store.dim();
    if ctx.neighbors.len() != ctx.owners.len() {
        return Err(contract("neighbor and owner lists differ in length"));
    }
    // owner -> (Σ w, Σ w x)
    let mut groups: BTreeMap<usize, (f64, Vec<f64>)> = BTreeMap::new();
    let mut t = Vec::new();
    for (&i, &g) in ctx.neighbors.iter().zip(ctx.owners) {
        let bw = ctx.bandwidths.bandwidth(g);
        if bw.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: bw.dim() });
        }
        t.resize(bw.blocks().len(), 0.0);
        let x = ctx.store.point(i);
        bw.block_distances(location, x, &mut t);
        let w = profile.joint_weight(&t);
        if w <= 0.0 {
            continue;
        }
        let entry = groups.entry(g).or_insert_with(|| (0.0, vec![0.0; d]));
        entry.0 += w;
        for k in 0..d {
            entry.1[k] += w * x[k];
        }
    }
    if groups.is_empty() {
        return Err(Error::Isolated);
    }
    let log_scale: Vec<f64> = groups.keys().map(|&g| -0.5 * ctx.bandwidths.bandwidth(g).log_det()).collect();
    let reference = log_scale.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let blocks: Vec<usize> = ctx
        .bandwidths
        .bandwidth(*groups.keys().next().unwrap())
        .blocks()
        .iter()
        .map(|b| b.dim())
        .collect();
    let mut precision = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for ((&g, (w_sum, wx_sum)), ls) in groups.iter().zip(&log_scale) {
        let scale = (ls - reference).exp();
        let bw = ctx.bandwidths.bandwidth(g);
        let block_sizes: Vec<usize> = bw.blocks().iter().map(|b| b.dim()).collect();
        if block_sizes != blocks {
            return Err(contract("owner bandwidths disagree on block layout"));
        }
        let mut start = 0;
        for block in bw.blocks() {
            let k = block.dim();
            let inv = block.inverse_row_major();
            for r in 0..k {
                let mut acc = 0.0;
                for c in 0..k {
                    precision[(start + r, start + c)] += scale * w_sum * inv[r * k + c];
                    acc += inv[r * k + c] * wx_sum[start + c];
                }
                rhs[start + r] += scale * acc;
            }
            start += k;
        }
    }
    Ok(FullSystem { precision, rhs, blocks })
}

impl FullSystem {
    /// Solves block by block; fails with [`Error::Degenerate`] when a block's
    /// condition estimate exceeds [`MAX_CONDITION`].
    pub fn solve(&self) -> Result<Vec<f64>> {
        let d = self.rhs.len();
        let mut out = vec![0.0; d];
        let mut start = 0;
        for &k in &self.blocks {
            let a = self.precision.view((start, start), (k, k)).clone_owned();
            let eig = SymmetricEigen::new(a.clone());
            let lo = eig.eigenvalues.min();
            let hi = eig.eigenvalues.max();
            if !(lo > 0.0) || hi / lo > MAX_CONDITION {
                let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
                return Err(Error::Degenerate(cond));
            }
            let b = self.rhs.rows(start, k).clone_owned();
            let chol = a.cholesky().ok_or(Error::Degenerate(f64::INFINITY))?;
            let f = chol.solve(&b);
            out[start..start + k].copy_from_slice(f.as_slice());
            start += k;
        }
        Ok(out)
    }
}

/// Full anisotropic step: every neighbor weighted under its owner's bandwidth.
pub fn update_full<B: OwnerBandwidths + ?Sized>(
    location: &[f64],
    ctx: &NeighborContext<'_, B>,
    profile: &KernelProfile,
) -> Result<Vec<f64>> {
    accumulate_full(location, ctx, profile)?.solve()
}

/// Joint-domain step in the requested mode. Requires a multi-block layout;
/// block structure is preserved by construction.
pub fn update_joint<B: OwnerBandwidths + ?Sized>(
    location: &[f64],
    own_bandwidth: &Bandwidth,
    sigma_base: &[f64],
    ctx: &NeighborContext<'_, B>,
    mode: UpdateMode,
    profile: &KernelProfile,
) -> Result<Vec<f64>> {
    if !ctx.store.domains().is_joint() {
        return Err(contract("joint update on single-domain data"));
    }
    apply(location, own_bandwidth, sigma_base, ctx, mode, profile)
}

/// Applies the update selected by `mode`. A degenerate full update falls back
/// to the partial one.
pub fn apply<B: OwnerBandwidths + ?Sized>(
    location: &[f64],
    own_bandwidth: &Bandwidth,
    sigma_base: &[f64],
    ctx: &NeighborContext<'_, B>,
    mode: UpdateMode,
    profile: &KernelProfile,
) -> Result<Vec<f64>> {
    match mode {
        UpdateMode::Scalar => update_scalar(location, ctx.store, ctx.neighbors, sigma_base, profile),
        UpdateMode::Partial => update_partial(location, own_bandwidth, ctx.store, ctx.neighbors, profile),
        UpdateMode::Full => match update_full(location, ctx, profile) {
            Err(Error::Degenerate(_)) => update_partial(location, own_bandwidth, ctx.store, ctx.neighbors, profile),
            other => other,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domains, SpdMatrix};
    use approx::assert_relative_eq;

    fn line_store(xs: &[f64]) -> PointStore {
        PointStore::new(xs.to_vec(), 1).unwrap()
    }

    #[test]
    fn lone_neighbor_is_fixed_point() {
        let store = PointStore::new(vec![1.0, 2.0], 2).unwrap();
        let f = update_scalar(&[1.3, 1.9], &store, &[0], &[1.0], &KernelProfile::gaussian()).unwrap();
        assert_eq!(f, vec![1.0, 2.0]);
    }

    #[test]
    fn symmetric_pair_gives_midpoint() {
        let store = line_store(&[-1.0, 1.0]);
        let f = update_scalar(&[0.0], &store, &[0, 1], &[1.0], &KernelProfile::gaussian()).unwrap();
        assert_relative_eq!(f[0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn isolated_when_support_empty() {
        let store = line_store(&[10.0]);
        assert!(matches!(
            update_scalar(&[0.0], &store, &[0], &[1.0], &KernelProfile::gaussian()),
            Err(Error::Isolated)
        ));
        assert!(matches!(
            update_scalar(&[0.0], &store, &[], &[1.0], &KernelProfile::gaussian()),
            Err(Error::Isolated)
        ));
    }

    #[test]
    fn partial_reduces_to_scalar_for_isotropic() {
        let store = line_store(&[0.0, 0.3, 0.9, 1.7]);
        let bw = Bandwidth::isotropic(store.domains(), &[0.64]).unwrap();
        let p = update_partial(&[0.5], &bw, &store, &[0, 1, 2, 3], &KernelProfile::gaussian()).unwrap();
        let s = update_scalar(&[0.5], &store, &[0, 1, 2, 3], &[0.8], &KernelProfile::gaussian()).unwrap();
        assert_relative_eq!(p[0], s[0], epsilon = 1e-14);
    }

    #[test]
    fn partial_reflection_symmetry() {
        // neighbors mirrored across the first axis through u; Σ eigenvectors are the axes
        let store = PointStore::new(vec![1.0, 0.5, 1.0, -0.5, 2.0, 0.7, 2.0, -0.7], 2).unwrap();
        let bw = Bandwidth::single(SpdMatrix::from_diagonal(&[3.0, 0.5]).unwrap());
        let f = update_partial(&[1.2, 0.0], &bw, &store, &[0, 1, 2, 3], &KernelProfile::gaussian()).unwrap();
        assert_relative_eq!(f[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn full_single_owner_equals_partial() {
        let store = PointStore::new(vec![0.0, 0.0, 1.0, 0.2, 0.4, 1.1, -0.3, 0.5], 2).unwrap();
        let m = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]);
        let bws = vec![Bandwidth::single(SpdMatrix::new(m).unwrap())];
        let nb = [0, 1, 2, 3];
        let owners = [0; 4];
        let ctx = NeighborContext::new(&store, &nb, &owners, &bws);
        let loc = [0.2, 0.3];
        let full = update_full(&loc, &ctx, &KernelProfile::gaussian()).unwrap();
        let part = update_partial(&loc, &bws[0], &store, &nb, &KernelProfile::gaussian()).unwrap();
        assert_relative_eq!(full[0], part[0], epsilon = 1e-13);
        assert_relative_eq!(full[1], part[1], epsilon = 1e-13);
    }

    #[test]
    fn full_trivial_clusters_equals_scalar() {
        let store = PointStore::new(vec![0.0, 0.0, 1.0, 0.2, 0.4, 1.1, -0.3, 0.5], 2).unwrap();
        let base = Bandwidth::isotropic(store.domains(), &[0.49]).unwrap();
        let bws = vec![base; 4];
        let nb = [0, 1, 2, 3];
        let ctx = NeighborContext::new(&store, &nb, &nb, &bws);
        let loc = [0.1, 0.4];
        let full = update_full(&loc, &ctx, &KernelProfile::gaussian()).unwrap();
        let s = update_scalar(&loc, &store, &nb, &[0.7], &KernelProfile::gaussian()).unwrap();
        assert_relative_eq!(full[0], s[0], epsilon = 1e-13);
        assert_relative_eq!(full[1], s[1], epsilon = 1e-13);
    }

    #[test]
    fn joint_precision_is_block_diagonal() {
        // 8x8 patch, σ_r² = 15, σ_s² = 16
        let mut data = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                data.extend_from_slice(&[50.0 + r as f64, (c as f64) * 0.5, -3.0, r as f64, c as f64]);
            }
        }
        let store = PointStore::with_domains(data, Domains::joint(3, 2)).unwrap();
        let bws: Vec<Bandwidth> = (0..4)
            .map(|k| Bandwidth::isotropic(store.domains(), &[15.0 + k as f64, 16.0 + 2.0 * k as f64]).unwrap())
            .collect();
        let nb: Vec<usize> = (0..64).collect();
        let owners: Vec<usize> = nb.iter().map(|i| i % 4).collect();
        let ctx = NeighborContext::new(&store, &nb, &owners, &bws);
        let sys = accumulate_full(store.point(27), &ctx, &KernelProfile::gaussian()).unwrap();
        for r in 0..3 {
            for c in 3..5 {
                assert_eq!(sys.precision[(r, c)], 0.0);
                assert_eq!(sys.precision[(c, r)], 0.0);
            }
        }
        let f = update_joint(store.point(27), &bws[0], &[15f64.sqrt(), 4.0], &ctx, UpdateMode::Full, &KernelProfile::gaussian()).unwrap();
        assert_eq!(f.len(), 5);
    }

    #[test]
    fn joint_update_rejects_single_domain() {
        let store = line_store(&[0.0]);
        let bws = vec![Bandwidth::isotropic(store.domains(), &[1.0]).unwrap()];
        let ctx = NeighborContext::new(&store, &[0], &[0], &bws);
        assert!(update_joint(&[0.0], &bws[0], &[1.0], &ctx, UpdateMode::Scalar, &KernelProfile::gaussian()).is_err());
    }

    #[test]
    fn dispatch_table() {
        assert_eq!(dispatch_by_ess(0.0, &[10.0], 5.0), UpdateMode::Scalar);
        assert_eq!(dispatch_by_ess(7.0, &[7.0, 2.0], 5.0), UpdateMode::Partial);
        assert_eq!(dispatch_by_ess(7.0, &[5.0, 9.0], 5.0), UpdateMode::Full);
        assert_eq!(dispatch_by_ess(4.999, &[9.0], 5.0), UpdateMode::Scalar);
    }

    #[test]
    fn degenerate_system_reported() {
        let sys = FullSystem {
            precision: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]),
            rhs: DVector::from_column_slice(&[1.0, 1.0]),
            blocks: vec![2],
        };
        assert!(matches!(sys.solve(), Err(Error::Degenerate(_))));
    }
}
