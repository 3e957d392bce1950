//! The agglomerative adaptive mean-shift driver.
//!
//! Each iteration visits every unconverged cluster in ascending id order:
//! location update, neighbor query, merge scan, bandwidth refresh, and the
//! convergence test (optionally followed by a perturbation).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{dense_size_threshold, maybe_update_bandwidth, Gate};
use crate::cluster::{init_clusters, AliveSet, ClusterTable, Phase, Status};
use crate::dataset::{build_index, compute_density, density_at, DensityField, FirstShiftCache, NeighborIndex, PointStore};
use crate::error::{contract, Error, Result};
use crate::geometry::{Bandwidth, KernelProfile};
use crate::partition::Partition;
use crate::updates::{apply, update_scalar, NeighborContext, UpdateMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub enabled: bool,
    pub max_count: usize,
    /// Magnitude of the first displacement; `None` means `2δ`.
    pub initial_magnitude: Option<f64>,
    pub damping: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self { enabled: false, max_count: 3, initial_magnitude: None, damping: 0.5 }
    }
}

impl Perturbation {
    /// Magnitude of the `k`-th perturbation (0-based).
    pub fn magnitude(&self, k: usize, delta: f64) -> f64 {
        self.initial_magnitude.unwrap_or(2.0 * delta) * self.damping.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Base kernel scale per domain block (standard deviation, not variance).
    pub sigma_base: Vec<f64>,
    /// Merge vicinity per domain block.
    pub epsilon: Vec<f64>,
    /// Minimum effective sample size for a trusted bandwidth.
    pub lambda: f64,
    /// Convergence threshold on the shift norm.
    pub delta: f64,
    /// Eigenvalue floor per block; `None` means `1e-4 σ_base²`.
    pub xi: Option<Vec<f64>>,
    /// Neighbor count `n'` for unstructured data.
    pub neighbors: usize,
    pub max_iterations: usize,
    pub perturbation: Perturbation,
    /// Member-count gate instead of the ESS gate; `None` enables it for pixel grids.
    pub dense_size_gate: Option<bool>,
    pub seed: u64,
    pub kernel: KernelProfile,
    /// Upper bound on the spatial query radius for pixel grids; `None` means
    /// twice the base support radius.
    pub max_window_radius: Option<f64>,
    /// Verify membership and bandwidth invariants after every iteration.
    pub check_invariants: bool,
}

impl RunConfig {
    pub fn single(sigma_base: f64, epsilon: f64) -> Self {
        Self::with_blocks(vec![sigma_base], vec![epsilon])
    }

    /// Joint range/spatial configuration from *squared* parameters
    /// `⟨σ_r², σ_s², ε_r², ε_s²⟩`.
    pub fn joint_squared(sigma_r2: f64, sigma_s2: f64, eps_r2: f64, eps_s2: f64) -> Self {
        Self::with_blocks(vec![sigma_r2.sqrt(), sigma_s2.sqrt()], vec![eps_r2.sqrt(), eps_s2.sqrt()])
    }

    pub fn with_blocks(sigma_base: Vec<f64>, epsilon: Vec<f64>) -> Self {
        Self {
            sigma_base,
            epsilon,
            lambda: 5.0,
            delta: 0.01,
            xi: None,
            neighbors: 64,
            max_iterations: 300,
            perturbation: Perturbation::default(),
            dense_size_gate: None,
            seed: 0,
            kernel: KernelProfile::gaussian(),
            max_window_radius: None,
            check_invariants: false,
        }
    }

    pub fn xi_values(&self) -> Vec<f64> {
        self.xi.clone().unwrap_or_else(|| self.sigma_base.iter().map(|s| 1e-4 * s * s).collect())
    }

    pub fn validate(&self, store: &PointStore) -> Result<()> {
        let blocks = store.domains().block_count();
        if self.sigma_base.len() != blocks {
            return Err(Error::DimensionMismatch { expected: blocks, got: self.sigma_base.len() });
        }
        if self.epsilon.len() != blocks {
            return Err(Error::DimensionMismatch { expected: blocks, got: self.epsilon.len() });
        }
        let xi = self.xi_values();
        if xi.len() != blocks {
            return Err(Error::DimensionMismatch { expected: blocks, got: xi.len() });
        }
        let positive = |v: &[f64]| v.iter().all(|&x| x > 0.0 && x.is_finite());
        if !positive(&self.sigma_base) || !positive(&self.epsilon) || !positive(&xi) {
            return Err(contract("scale parameters must be positive"));
        }
        if !(self.delta > 0.0) || self.max_iterations == 0 || self.neighbors == 0 {
            return Err(contract("delta, max_iterations and neighbors must be positive"));
        }
        if self.perturbation.enabled && !(self.perturbation.damping > 0.0) {
            return Err(contract("perturbation damping must be positive"));
        }
        Ok(())
    }
}

/// Diagnostic record emitted once per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub alive_count: usize,
    pub converged_count: usize,
    pub merges_this_iter: usize,
}

/// Surviving cluster at the end of a run.
#[derive(Debug, Clone)]
pub struct ClusterSummary {
    pub id: usize,
    pub members: Vec<usize>,
    pub mode: Vec<f64>,
    pub bandwidth: Bandwidth,
    pub ess: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// Owning cluster id of every point.
    pub labels: Vec<usize>,
    /// Surviving clusters in ascending id order.
    pub clusters: Vec<ClusterSummary>,
    pub iterations: usize,
    /// `|U^τ|` for τ = 0, 1, …
    pub alive_history: Vec<usize>,
    pub diagnostics: Vec<IterationStats>,
    pub max_iterations_reached: bool,
    pub density: DensityField,
}

impl RunResult {
    /// Compacted partition without post-processing.
    pub fn partition(&self) -> Partition {
        let pos: std::collections::HashMap<usize, usize> =
            self.clusters.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        Partition::from_keys(&self.labels, |k| {
            let c = &self.clusters[pos[&k]];
            (c.mode.clone(), c.bandwidth.clone())
        })
    }

    /// Alive count after `iteration` iterations, or the final count if the run ended earlier.
    pub fn alive_at(&self, iteration: usize) -> usize {
        self.alive_history
            .get(iteration)
            .or(self.alive_history.last())
            .copied()
            .unwrap_or(0)
    }

    /// Last iteration in which any merge happened.
    pub fn last_merge_iteration(&self) -> Option<usize> {
        self.diagnostics.iter().rev().find(|s| s.merges_this_iter > 0).map(|s| s.iteration)
    }
}

/// Merge predicate: `u` is approaching `y` and both shift bearings agree.
pub fn merge_check(u_loc: &[f64], y: &[f64], m_u: &[f64], y_shift: &[f64], prev_u_loc: &[f64]) -> bool {
    let d_now: f64 = u_loc.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let d_prev: f64 = prev_u_loc.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let bearing: f64 = m_u.iter().zip(y_shift).map(|(a, b)| a * b).sum();
    d_now < d_prev && bearing > 0.0
}

/// Read-only view handed to run observers after each iteration.
pub struct IterationView<'a> {
    pub stats: IterationStats,
    pub table: &'a ClusterTable,
    pub alive: &'a AliveSet,
    pub xi: &'a [f64],
}

/// Immutable per-run precomputation.
pub struct Prepared {
    pub index: NeighborIndex,
    pub density: DensityField,
    pub first_shift: FirstShiftCache,
    pub base: Bandwidth,
}

struct Engine<'a> {
    store: &'a PointStore,
    config: &'a RunConfig,
    prep: &'a Prepared,
    xi: Vec<f64>,
    gate: Gate,
    window_cap: f64,
}

impl<'a> Engine<'a> {
    fn neighborhood(&self, loc: &[f64], bw: &Bandwidth) -> Vec<usize> {
        neighborhood(self.store, &self.prep.index, self.config, loc, bw, self.window_cap)
    }

    fn within_epsilon(&self, a: &[f64], b: &[f64]) -> bool {
        self.store.domains().ranges().zip(&self.config.epsilon).all(|(r, eps)| {
            let d2: f64 = a[r.clone()].iter().zip(&b[r]).map(|(x, y)| (x - y) * (x - y)).sum();
            d2 <= eps * eps
        })
    }

    /// One visit of cluster `u`. Returns the number of merges it caused.
    fn step(&self, u: usize, table: &mut ClusterTable, alive: &mut AliveSet) -> Result<usize> {
        let cfg = self.config;
        let store = self.store;
        let loc = table.get(u).location.clone();

        let new_loc = if table.get(u).updates == 0 && loc.as_slice() == store.point(u) {
            // first step of a trivial cluster is the cached scalar step
            loc.iter().zip(self.prep.first_shift.get(u)).map(|(a, b)| a + b).collect()
        } else {
            let c = table.get(u);
            let nbrs = self.neighborhood(&loc, &c.bandwidth);
            let owners: Vec<usize> = nbrs.iter().map(|&i| table.owner(i)).collect();
            let mode = if c.phase == Phase::Scalar {
                UpdateMode::Scalar
            } else if owners.iter().all(|&g| table.get(g).phase == Phase::Anisotropic) {
                UpdateMode::Full
            } else {
                UpdateMode::Partial
            };
            let ctx = NeighborContext::new(store, &nbrs, &owners, &*table);
            match apply(&loc, &c.bandwidth, &cfg.sigma_base, &ctx, mode, &cfg.kernel) {
                Ok(f) => f,
                Err(Error::Isolated) => {
                    let c = table.get_mut(u);
                    c.shift = vec![0.0; loc.len()];
                    c.shift_norm = 0.0;
                    c.status = Status::Converged;
                    return Ok(0);
                }
                Err(e) => return Err(e),
            }
        };

        let shift: Vec<f64> = new_loc.iter().zip(&loc).map(|(a, b)| a - b).collect();
        let shift_norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rho = density_at(&new_loc, &self.prep.density, &self.prep.index);
        {
            let c = table.get_mut(u);
            c.moments.push(&new_loc, rho);
            c.reservoir.push(&new_loc);
            c.location = new_loc.clone();
            c.shift = shift.clone();
            c.shift_norm = shift_norm;
            c.rho = rho;
            c.updates += 1;
        }

        // merge scan over Ne_x(u^{τ+1}), nearest first
        let nbrs = self.neighborhood(&new_loc, &table.get(u).bandwidth);
        let mut candidates: Vec<(f64, usize)> = nbrs
            .into_iter()
            .filter(|&y| table.owner(y) != u && self.within_epsilon(&new_loc, store.point(y)))
            .map(|y| {
                let d2: f64 = new_loc.iter().zip(store.point(y)).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, y)
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut merges = 0;
        for (_, y) in candidates {
            let g = table.owner(y);
            if g == u {
                continue;
            }
            if !merge_check(&new_loc, store.point(y), &shift, self.prep.first_shift.get(y), &loc) {
                continue;
            }
            let rho_g = table.get(g).rho;
            merges += 1;
            if rho > rho_g || (rho == rho_g && u < g) {
                table.absorb(u, g, alive)?;
            } else {
                table.absorb(g, u, alive)?;
                return Ok(merges);
            }
        }

        let domains = store.domains();
        maybe_update_bandwidth(table.get_mut(u), domains, &self.xi, self.gate, &cfg.kernel)?;

        if shift_norm <= cfg.delta {
            let c = table.get_mut(u);
            if cfg.perturbation.enabled && c.perturbations < cfg.perturbation.max_count {
                perturb(c, cfg);
            } else {
                c.status = Status::Converged;
            }
        }
        Ok(merges)
    }
}

/// `Ne_x(q)`: a spatial disc for pixel grids (radius from the spatial bandwidth
/// block, at least the spatial merge vicinity), otherwise the `n'` nearest points.
pub fn neighborhood(
    store: &PointStore,
    index: &NeighborIndex,
    config: &RunConfig,
    q: &[f64],
    bw: &Bandwidth,
    window_cap: f64,
) -> Vec<usize> {
    match store.grid() {
        Some(_) => {
            let spatial = bw.blocks().last().expect("joint bandwidth");
            let eps_s = *config.epsilon.last().unwrap();
            let r = (config.kernel.support_radius * spatial.max_eigenvalue().sqrt()).max(eps_s).min(window_cap);
            index.spatial_window(q, r).expect("grid store")
        }
        None => index.k_nearest(q, config.neighbors),
    }
}

fn window_cap(config: &RunConfig) -> f64 {
    config
        .max_window_radius
        .unwrap_or_else(|| 2.0 * config.kernel.support_radius * config.sigma_base.last().copied().unwrap_or(1.0))
        .max(*config.epsilon.last().unwrap_or(&0.0))
}

/// Index, density field, first-iteration shifts and base bandwidth.
pub fn prepare(store: &PointStore, config: &RunConfig) -> Result<Prepared> {
    config.validate(store)?;
    let index = build_index(store);
    let density = compute_density(store, &config.sigma_base, &index, &config.kernel)?;
    let variances: Vec<f64> = config.sigma_base.iter().map(|s| s * s).collect();
    let base = Bandwidth::isotropic(store.domains(), &variances)?;
    let cap = window_cap(config);
    let d = store.dim();
    let shifts: Vec<Vec<f64>> = (0..store.len())
        .into_par_iter()
        .map(|i| {
            let x = store.point(i);
            let nbrs = neighborhood(store, &index, config, x, &base, cap);
            match update_scalar(x, store, &nbrs, &config.sigma_base, &config.kernel) {
                Ok(f) => Ok(f.iter().zip(x).map(|(a, b)| a - b).collect()),
                Err(Error::Isolated) => Ok(vec![0.0; d]),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let first_shift = FirstShiftCache::from_shifts(shifts.concat(), d);
    Ok(Prepared { index, density, first_shift, base })
}

/// Displaces a converged cluster along a seeded random direction with a
/// geometrically damped magnitude. The displaced point is not a trajectory point.
pub fn perturb(c: &mut crate::cluster::Cluster, config: &RunConfig) {
    let p = &config.perturbation;
    if !p.enabled || c.perturbations >= p.max_count {
        return;
    }
    let k = c.perturbations;
    let mag = p.magnitude(k, config.delta);
    let seed = config
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((c.id as u64) << 8)
        .wrapping_add(k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..c.location.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in dir.iter_mut() {
            *v /= norm;
        }
    }
    for (x, v) in c.location.iter_mut().zip(&dir) {
        *x += mag * v;
    }
    c.perturbations += 1;
    c.pending_perturbation = true;
    c.status = Status::Active;
}

pub fn run(store: &PointStore, config: &RunConfig) -> Result<RunResult> {
    run_with_observer(store, config, |_| {})
}

/// [`run`] with a callback after each iteration.
pub fn run_with_observer(
    store: &PointStore,
    config: &RunConfig,
    mut observer: impl FnMut(&IterationView<'_>),
) -> Result<RunResult> {
    let prep = prepare(store, config)?;
    let xi = config.xi_values();
    let size_gate = config.dense_size_gate.unwrap_or(store.grid().is_some());
    let gate = if size_gate { Gate::Size(dense_size_threshold(store.domains())) } else { Gate::Ess(config.lambda) };
    let engine = Engine { store, config, prep: &prep, xi: xi.clone(), gate, window_cap: window_cap(config) };

    let (mut alive, mut table) = init_clusters(store.data(), store.dim(), &prep.base, prep.density.values());
    let mut alive_history = vec![alive.ids.len()];
    let mut diagnostics = Vec::new();
    let mut converged_all = false;

    for iteration in 1..=config.max_iterations {
        let active: Vec<usize> = alive.ids.iter().copied().filter(|&u| table.get(u).needs_update()).collect();
        if active.is_empty() {
            converged_all = true;
            break;
        }
        let before = alive.ids.len();
        let mut merges = 0;
        for u in active {
            if !table.get(u).is_alive() || !table.get(u).needs_update() {
                continue;
            }
            table.get_mut(u).pending_perturbation = false;
            merges += engine.step(u, &mut table, &mut alive)?;
        }
        alive.iteration = iteration;
        if alive.ids.len() > before {
            return Err(contract("alive set grew"));
        }
        let stats = IterationStats {
            iteration,
            alive_count: alive.ids.len(),
            converged_count: alive.ids.iter().filter(|&&u| table.get(u).status == Status::Converged).count(),
            merges_this_iter: merges,
        };
        if config.check_invariants {
            check_invariants(&table, &xi)?;
        }
        observer(&IterationView { stats, table: &table, alive: &alive, xi: &xi });
        alive_history.push(stats.alive_count);
        diagnostics.push(stats);
    }
    if !converged_all {
        converged_all = alive.ids.iter().all(|&u| !table.get(u).needs_update());
    }

    let clusters: Vec<ClusterSummary> = alive
        .ids
        .iter()
        .map(|&u| {
            let c = table.get(u);
            let mut members = c.members.clone();
            members.sort_unstable();
            ClusterSummary {
                id: u,
                members,
                mode: c.location.clone(),
                bandwidth: c.bandwidth.clone(),
                ess: c.ess,
                converged: c.status == Status::Converged,
            }
        })
        .collect();
    Ok(RunResult {
        labels: table.owners().to_vec(),
        clusters,
        iterations: diagnostics.len(),
        alive_history,
        diagnostics,
        max_iterations_reached: !converged_all,
        density: prep.density,
    })
}

/// Membership partition plus the eigenvalue floor on every live bandwidth.
pub fn check_invariants(table: &ClusterTable, xi: &[f64]) -> Result<()> {
    table.check_partition()?;
    for c in table.alive() {
        for (block, &floor) in c.bandwidth.blocks().iter().zip(xi) {
            if block.min_eigenvalue() < floor * (1.0 - 1e-9) {
                return Err(contract(format!("cluster {} bandwidth below floor", c.id)));
            }
        }
    }
    Ok(())
}

/// Writes diagnostics as JSON lines.
pub fn write_diagnostics<W: std::io::Write>(mut w: W, stats: &[IterationStats]) -> Result<()> {
    for s in stats {
        serde_json::to_writer(&mut w, s)?;
        writeln!(w)?;
    }
    Ok(())
}
