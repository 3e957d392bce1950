//! Per-cluster bookkeeping: membership, trajectory moments, location, shift,
//! bandwidth and effective sample size, plus the alive set.

use std::collections::BTreeSet;

use crate::error::{contract, Result};
use crate::geometry::{Bandwidth, KernelProfile};

/// Trajectory points kept per cluster for the effective-sample-size numerator.
pub const RESERVOIR_CAPACITY: usize = 64;

/// Running sums over a trajectory set. Union of sets is moment addition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMoments {
    dim: usize,
    /// `Σ ρ(v)`
    pub w: f64,
    /// `Σ ρ(v) v`
    pub wx: Vec<f64>,
    /// `Σ ρ(v) v vᵀ`, row-major `d×d`
    pub wxx: Vec<f64>,
    /// `Σ v`, for the unweighted mean
    pub sum: Vec<f64>,
    pub count: usize,
}

impl TrajectoryMoments {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            w: 0.0,
            wx: vec![0.0; dim],
            wxx: vec![0.0; dim * dim],
            sum: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn push(&mut self, v: &[f64], rho: f64) {
        debug_assert_eq!(v.len(), self.dim);
        let d = self.dim;
        self.w += rho;
        for i in 0..d {
            self.wx[i] += rho * v[i];
            self.sum[i] += v[i];
            let rv = rho * v[i];
            for j in 0..d {
                self.wxx[i * d + j] += rv * v[j];
            }
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &TrajectoryMoments) {
        self.w += other.w;
        for (a, b) in self.wx.iter_mut().zip(&other.wx) {
            *a += b;
        }
        for (a, b) in self.wxx.iter_mut().zip(&other.wxx) {
            *a += b;
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.count += other.count;
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Unweighted trajectory mean `T̄`.
    pub fn mean(&self) -> Option<Vec<f64>> {
        (self.count > 0).then(|| self.sum.iter().map(|s| s / self.count as f64).collect())
    }
}

/// Bounded window of the most recent trajectory points.
#[derive(Debug, Clone, PartialEq)]
pub struct Reservoir {
    dim: usize,
    points: Vec<f64>,
}

impl Reservoir {
    pub fn new(dim: usize) -> Self {
        Self { dim, points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn push(&mut self, v: &[f64]) {
        if self.len() == RESERVOIR_CAPACITY {
            self.points.drain(..self.dim);
        }
        self.points.extend_from_slice(v);
    }

    /// Concatenates both windows and keeps an evenly spaced subsample when over capacity.
    pub fn merge(&mut self, other: &Reservoir) {
        self.points.extend_from_slice(&other.points);
        let len = self.len();
        if len <= RESERVOIR_CAPACITY {
            return;
        }
        let d = self.dim;
        let mut kept = Vec::with_capacity(RESERVOIR_CAPACITY * d);
        for k in 0..RESERVOIR_CAPACITY {
            let i = k * len / RESERVOIR_CAPACITY;
            kept.extend_from_slice(&self.points[i * d..(i + 1) * d]);
        }
        self.points = kept;
    }

    pub fn clear(&mut self) {
        self.points.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Updates use the fixed base bandwidth.
    Scalar,
    /// The cluster owns a data-driven bandwidth estimate.
    Anisotropic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Active,
    Converged,
    Absorbed,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    /// Equals the principal member's point id.
    pub id: usize,
    pub members: Vec<usize>,
    pub location: Vec<f64>,
    pub shift: Vec<f64>,
    pub shift_norm: f64,
    pub bandwidth: Bandwidth,
    pub moments: TrajectoryMoments,
    pub reservoir: Reservoir,
    pub ess: f64,
    /// Density at the current location.
    pub rho: f64,
    pub phase: Phase,
    pub status: Status,
    pub perturbations: usize,
    /// Set after a perturbation so the cluster is revisited next iteration.
    pub pending_perturbation: bool,
    /// Number of location updates performed.
    pub updates: usize,
}

impl Cluster {
    pub fn is_alive(&self) -> bool {
        self.status != Status::Absorbed
    }

    pub fn needs_update(&self) -> bool {
        self.status == Status::Active
    }
}

/// All clusters indexed by id, plus the point → owner map `Π`.
#[derive(Debug, Clone)]
pub struct ClusterTable {
    clusters: Vec<Cluster>,
    owner: Vec<usize>,
}

/// Ordered set of surviving cluster ids at an iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliveSet {
    pub ids: BTreeSet<usize>,
    pub iteration: usize,
}

/// One trivial cluster per point, each with the base bandwidth.
pub fn init_clusters(points: &[f64], dim: usize, base: &Bandwidth, rho: &[f64]) -> (AliveSet, ClusterTable) {
    let n = points.len() / dim;
    let clusters = (0..n)
        .map(|i| Cluster {
            id: i,
            members: vec![i],
            location: points[i * dim..(i + 1) * dim].to_vec(),
            shift: vec![f64::INFINITY; dim],
            shift_norm: f64::INFINITY,
            bandwidth: base.clone(),
            moments: TrajectoryMoments::new(dim),
            reservoir: Reservoir::new(dim),
            ess: 0.0,
            rho: rho[i],
            phase: Phase::Scalar,
            status: Status::Active,
            perturbations: 0,
            pending_perturbation: false,
            updates: 0,
        })
        .collect();
    (
        AliveSet { ids: (0..n).collect(), iteration: 0 },
        ClusterTable { clusters, owner: (0..n).collect() },
    )
}

impl ClusterTable {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    #[inline]
    pub fn get(&self, id: usize) -> &Cluster {
        &self.clusters[id]
    }

    #[inline]
    pub fn get_mut(&mut self, id: usize) -> &mut Cluster {
        &mut self.clusters[id]
    }

    /// `Π(x_i)`: the cluster currently holding point `i`.
    #[inline]
    pub fn owner(&self, point: usize) -> usize {
        self.owner[point]
    }

    pub fn owners(&self) -> &[usize] {
        &self.owner
    }

    pub fn iter(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter()
    }

    pub fn alive(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(|c| c.is_alive())
    }

    /// Moves every member and trajectory moment of `loser` into `winner`.
    pub fn absorb(&mut self, winner: usize, loser: usize, alive: &mut AliveSet) -> Result<()> {
        if winner == loser {
            return Err(contract("a cluster cannot absorb itself"));
        }
        if !self.clusters[winner].is_alive() || !self.clusters[loser].is_alive() {
            return Err(contract(format!("absorb({winner}, {loser}) involves an absorbed cluster")));
        }
        let mut taken = std::mem::take(&mut self.clusters[loser].members);
        for &p in &taken {
            self.owner[p] = winner;
        }
        let dim = self.clusters[loser].moments.dim();
        let moments = std::mem::replace(&mut self.clusters[loser].moments, TrajectoryMoments::new(dim));
        let reservoir = std::mem::replace(&mut self.clusters[loser].reservoir, Reservoir::new(dim));
        self.clusters[loser].status = Status::Absorbed;
        self.clusters[loser].ess = 0.0;

        let w = &mut self.clusters[winner];
        w.members.append(&mut taken);
        w.moments.merge(&moments);
        w.reservoir.merge(&reservoir);
        alive.ids.remove(&loser);
        Ok(())
    }

    /// Checks that alive clusters' members partition `0..n` and that `Π` agrees.
    pub fn check_partition(&self) -> Result<()> {
        let n = self.owner.len();
        let mut seen = vec![false; n];
        for c in self.alive() {
            if !c.members.contains(&c.id) {
                return Err(contract(format!("cluster {} lost its principal member", c.id)));
            }
            for &m in &c.members {
                if seen[m] {
                    return Err(contract(format!("point {m} has two owners")));
                }
                seen[m] = true;
                if self.owner[m] != c.id {
                    return Err(contract(format!("owner map disagrees for point {m}")));
                }
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(contract(format!("point {p} has no owner")));
        }
        Ok(())
    }
}

/// Kernel-weighted trajectory count:
/// `Σ_v |K'|(‖T̄ − v‖²_Σ) / |K'|(0)` over the supplied trajectory points.
pub fn effective_sample_size<'a>(
    points: impl IntoIterator<Item = &'a [f64]>,
    mean: &[f64],
    sigma_est: &Bandwidth,
    profile: &KernelProfile,
) -> f64 {
    let blocks = sigma_est.blocks().len();
    let mut t = vec![0.0; blocks];
    let zero = vec![0.0; blocks];
    let norm = profile.joint_weight(&zero);
    points
        .into_iter()
        .map(|v| {
            sigma_est.block_distances(mean, v, &mut t);
            profile.joint_weight(&t)
        })
        .sum::<f64>()
        / norm
}

impl Cluster {
    /// ESS of this cluster's trajectory set under `sigma_est`. When the set outgrew
    /// the reservoir the reservoir sum is scaled to the full count.
    pub fn effective_sample_size(&self, sigma_est: &Bandwidth, profile: &KernelProfile) -> f64 {
        let mean = match self.moments.mean() {
            Some(m) => m,
            None => return 0.0,
        };
        let kept = self.reservoir.len();
        if kept == 0 {
            return 0.0;
        }
        let ess = effective_sample_size(self.reservoir.points(), &mean, sigma_est, profile);
        ess * self.moments.count as f64 / kept as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Domains, SpdMatrix};
    use approx::assert_relative_eq;

    fn table(points: &[f64], dim: usize) -> (AliveSet, ClusterTable) {
        let base = Bandwidth::isotropic(&Domains::single(dim), &[1.0]).unwrap();
        init_clusters(points, dim, &base, &vec![1.0; points.len() / dim])
    }

    #[test]
    fn single_point_init() {
        let (alive, t) = table(&[2.0, 3.0], 2);
        assert_eq!(alive.ids.len(), 1);
        assert_eq!(t.get(0).members, vec![0]);
        assert_eq!(t.get(0).location, vec![2.0, 3.0]);
        assert!(t.get(0).shift_norm.is_infinite());
    }

    #[test]
    fn five_point_init() {
        let (alive, t) = table(&[0.0, 1.0, 2.0, 3.0, 4.0], 1);
        assert_eq!(alive.ids.len(), 5);
        assert!(t.iter().all(|c| c.ess == 0.0 && c.moments.is_empty()));
        t.check_partition().unwrap();
    }

    #[test]
    fn joint_base_bandwidth() {
        let base = Bandwidth::isotropic(&Domains::joint(2, 2), &[4.0, 9.0]).unwrap();
        let (_, t) = init_clusters(&[0.0; 4], 4, &base, &[1.0]);
        let dense = t.get(0).bandwidth.to_dense();
        let diag: Vec<f64> = (0..4).map(|i| dense[(i, i)]).collect();
        assert_eq!(diag, vec![4.0, 4.0, 9.0, 9.0]);
        assert_eq!(dense[(0, 2)], 0.0);
    }

    #[test]
    fn absorb_singletons() {
        let (mut alive, mut t) = table(&[0.0, 1.0], 1);
        t.absorb(1, 0, &mut alive).unwrap();
        assert_eq!(t.get(1).members, vec![1, 0]);
        assert_eq!(t.get(1).moments.count, 0);
        assert_eq!(t.get(0).status, Status::Absorbed);
        assert_eq!(t.owner(0), 1);
        assert_eq!(alive.ids.len(), 1);
        assert!(t.absorb(1, 0, &mut alive).is_err());
        assert!(t.absorb(1, 1, &mut alive).is_err());
        t.check_partition().unwrap();
    }

    #[test]
    fn absorb_adds_moments() {
        let (mut alive, mut t) = table(&[0.0, 1.0], 1);
        // winner: w=2 over three points, loser: w=1 over two
        for (v, r) in [(0.1, 0.5), (0.2, 1.0), (0.3, 0.5)] {
            t.get_mut(0).moments.push(&[v], r);
        }
        for (v, r) in [(0.4, 0.25), (0.5, 0.75)] {
            t.get_mut(1).moments.push(&[v], r);
        }
        t.absorb(0, 1, &mut alive).unwrap();
        assert_relative_eq!(t.get(0).moments.w, 3.0);
        assert_eq!(t.get(0).moments.count, 5);
    }

    #[test]
    fn split_then_absorb_matches_unsplit() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> = (0..40).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let rhos: Vec<f64> = (0..40).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut whole = TrajectoryMoments::new(3);
        for (p, &r) in pts.iter().zip(&rhos) {
            whole.push(p, r);
        }
        let (mut alive, mut t) = table(&[0.0; 6], 3);
        for (p, &r) in pts.iter().zip(&rhos) {
            let target = if rng.random_bool(0.5) { 0 } else { 1 };
            t.get_mut(target).moments.push(p, r);
        }
        t.absorb(1, 0, &mut alive).unwrap();
        let merged = &t.get(1).moments;
        assert_eq!(merged.count, whole.count);
        assert_relative_eq!(merged.w, whole.w, max_relative = 1e-12);
        for (a, b) in merged.wx.iter().zip(&whole.wx).chain(merged.wxx.iter().zip(&whole.wxx)) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn ess_singleton_is_one() {
        let bw = Bandwidth::single(SpdMatrix::scaled_identity(2, 0.3).unwrap());
        let pts = [[1.0, 2.0]];
        let ess = effective_sample_size(pts.iter().map(|p| &p[..]), &[1.0, 2.0], &bw, &KernelProfile::gaussian());
        assert_relative_eq!(ess, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn ess_coincident_points_counts() {
        let bw = Bandwidth::single(SpdMatrix::scaled_identity(1, 1.0).unwrap());
        let pts = [[0.7]; 9];
        let ess = effective_sample_size(pts.iter().map(|p| &p[..]), &[0.7], &bw, &KernelProfile::gaussian());
        assert_relative_eq!(ess, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn ess_spread_points_direct_sum() {
        let bw = Bandwidth::single(SpdMatrix::scaled_identity(1, 0.01).unwrap());
        let pts = [[-0.2], [-0.1], [0.0], [0.1], [0.2]];
        let ess = effective_sample_size(pts.iter().map(|p| &p[..]), &[0.0], &bw, &KernelProfile::gaussian());
        // oracle: Σ exp(-d²/(2·0.01)), zero beyond 3σ = 0.3
        let oracle: f64 = pts.iter().map(|p| (-(p[0] * p[0]) / 0.02).exp()).sum();
        assert_relative_eq!(ess, oracle, epsilon = 1e-12);
        assert!(ess < 5.0);
    }

    #[test]
    fn reservoir_keeps_most_recent() {
        let mut r = Reservoir::new(1);
        for i in 0..(RESERVOIR_CAPACITY + 10) {
            r.push(&[i as f64]);
        }
        assert_eq!(r.len(), RESERVOIR_CAPACITY);
        assert_eq!(r.points().next().unwrap(), &[10.0]);
        let mut other = Reservoir::new(1);
        other.push(&[-1.0]);
        r.merge(&other);
        assert_eq!(r.len(), RESERVOIR_CAPACITY);
    }
}
