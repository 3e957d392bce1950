//! Cleanup of a finished run: contiguity splits, adjacency graph, minimum-size
//! merging and Bhattacharyya mode merging.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::agglomerator::RunResult;
use crate::bandwidth::estimate_bandwidth;
use crate::cluster::TrajectoryMoments;
use crate::dataset::{DensityField, PixelGrid, PointStore};
use crate::error::{contract, Error, Result};
use crate::geometry::{Bandwidth, SpdMatrix};
use crate::partition::{compact_labels, Partition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub min_size: usize,
    pub db_threshold: f64,
    /// Repeat the d_B merge with refreshed statistics until nothing merges.
    pub fixpoint: bool,
    /// Eigenvalue floor per domain block.
    pub xi: Vec<f64>,
    /// Domain block used for d_B and mode distances; `None` uses all features.
    pub db_block: Option<usize>,
}

impl PostprocessConfig {
    pub fn new(xi: Vec<f64>) -> Self {
        Self { min_size: 10, db_threshold: 1.0, fixpoint: false, xi, db_block: None }
    }

    /// Image defaults: d_B evaluated over the color block only.
    pub fn for_image(xi: Vec<f64>) -> Self {
        Self { db_block: Some(0), ..Self::new(xi) }
    }
}

/// Bhattacharyya divergence between two Gaussians.
pub fn bhattacharyya(mu_a: &[f64], sigma_a: &DMatrix<f64>, mu_b: &[f64], sigma_b: &DMatrix<f64>) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || sigma_a.shape() != (d, d) || sigma_b.shape() != (d, d) {
        return Err(Error::DimensionMismatch { expected: d, got: mu_b.len() });
    }
    let avg = (sigma_a + sigma_b) * 0.5;
    let chol = avg.clone().cholesky().ok_or_else(|| contract("average covariance is singular"))?;
    let diff = DVector::from_iterator(d, mu_a.iter().zip(mu_b).map(|(a, b)| a - b));
    let maha = diff.dot(&chol.solve(&diff));
    let ld_avg = log_det_psd(&avg);
    let ld_ab = log_det_psd(sigma_a) + log_det_psd(sigma_b);
    if ld_ab == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok((maha / 8.0 + 0.5 * (ld_avg - 0.5 * ld_ab)).max(0.0))
}

fn log_det_psd(m: &DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

/// Density-weighted mean and per-block covariance of member data points,
/// clamped at `xi`. Falls back to uniform weights when every density is zero.
pub fn standalone_covariance(
    store: &PointStore,
    members: &[usize],
    density: &DensityField,
    xi: &[f64],
) -> Result<(Vec<f64>, Bandwidth)> {
    if members.is_empty() {
        return Err(contract("empty cluster"));
    }
    let mut m = TrajectoryMoments::new(store.dim());
    for &i in members {
        m.push(store.point(i), density.get(i));
    }
    let est = match estimate_bandwidth(&m, store.domains(), xi) {
        Err(Error::NoMass) => {
            let mut u = TrajectoryMoments::new(store.dim());
            for &i in members {
                u.push(store.point(i), 1.0);
            }
            estimate_bandwidth(&u, store.domains(), xi)?
        }
        other => other?,
    };
    Ok((est.eta, est.sigma))
}

/// Splits every label into its 4-connected components. Components are
/// numbered in raster order of their first pixel.
pub fn connected_components(labels: &[usize], grid: PixelGrid) -> Vec<usize> {
    let n = grid.len();
    assert_eq!(labels.len(), n);
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            for q in grid.neighbors4(p) {
                if comp[q] == usize::MAX && labels[q] == labels[p] {
                    comp[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    comp
}

#[derive(Debug, Clone)]
struct Group {
    members: Vec<usize>,
    mode: Vec<f64>,
    rho: f64,
    stats: Option<Bandwidth>,
}

/// Mutable cluster graph used by the merge passes.
struct Graph<'a> {
    store: &'a PointStore,
    density: &'a DensityField,
    config: &'a PostprocessConfig,
    groups: Vec<Option<Group>>,
    adj: Vec<BTreeSet<usize>>,
    block: std::ops::Range<usize>,
}

impl<'a> Graph<'a> {
    fn alive(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.groups.len()).filter(|&g| self.groups[g].is_some())
    }

    fn group(&self, g: usize) -> &Group {
        self.groups[g].as_ref().expect("live group")
    }

    fn stats(&mut self, g: usize) -> Result<Bandwidth> {
        if let Some(s) = &self.group(g).stats {
            return Ok(s.clone());
        }
        let (_, bw) = standalone_covariance(self.store, &self.group(g).members, self.density, &self.config.xi)?;
        self.groups[g].as_mut().unwrap().stats = Some(bw.clone());
        Ok(bw)
    }

    fn block_index(&self) -> Option<usize> {
        self.config.db_block
    }

    fn divergence(&mut self, a: usize, b: usize) -> Result<f64> {
        let sa = self.stats(a)?;
        let sb = self.stats(b)?;
        let r = self.block.clone();
        let (ma, mb) = match self.block_index() {
            Some(k) => (sa.blocks()[k].matrix().clone(), sb.blocks()[k].matrix().clone()),
            None => (sa.to_dense(), sb.to_dense()),
        };
        bhattacharyya(&self.group(a).mode[r.clone()], &ma, &self.group(b).mode[r], &mb)
    }

    fn mode_distance(&self, a: usize, b: usize) -> f64 {
        let r = self.block.clone();
        let (x, y) = (&self.group(a).mode[r.clone()], &self.group(b).mode[r]);
        x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    }

    /// Merges `b` into `a`. The mode of the denser group survives.
    fn merge(&mut self, a: usize, b: usize) {
        let gb = self.groups[b].take().expect("live group");
        let ga = self.groups[a].as_mut().expect("live group");
        ga.members.extend(gb.members);
        if gb.rho > ga.rho {
            ga.mode = gb.mode;
            ga.rho = gb.rho;
        }
        ga.stats = None;
        let nb = std::mem::take(&mut self.adj[b]);
        for &c in &nb {
            self.adj[c].remove(&b);
            if c != a {
                self.adj[c].insert(a);
                self.adj[a].insert(c);
            }
        }
        self.adj[a].remove(&b);
    }

    /// Small groups are merged, smallest first, into their closest neighbor:
    /// smallest d_B when both groups can support a full covariance, otherwise
    /// smallest mode distance.
    fn merge_small(&mut self) -> Result<()> {
        let full_rank = self.block.len() + 1;
        loop {
            let small = self
                .alive()
                .filter(|&g| self.group(g).members.len() < self.config.min_size && !self.adj[g].is_empty())
                .min_by_key(|&g| (self.group(g).members.len(), g));
            let Some(g) = small else { break };
            let nbrs: Vec<usize> = self.adj[g].iter().copied().collect();
            let mut best: Option<(bool, f64, usize)> = None;
            for h in nbrs {
                let use_db = self.group(g).members.len() >= full_rank && self.group(h).members.len() >= full_rank;
                let d = if use_db { self.divergence(g, h)? } else { self.mode_distance(g, h) };
                // d_B candidates rank ahead of distance fallbacks
                let key = (!use_db, d, h);
                if best.is_none_or(|b| (key.0, key.1, key.2) < (b.0, b.1, b.2)) {
                    best = Some(key);
                }
            }
            let (_, _, h) = best.unwrap();
            let (keep, drop) = if self.group(h).members.len() >= self.group(g).members.len() { (h, g) } else { (g, h) };
            self.merge(keep, drop);
        }
        Ok(())
    }

    fn edges(&mut self) -> Result<Vec<(f64, usize, usize)>> {
        let mut out = Vec::new();
        let pairs: Vec<(usize, usize)> = self
            .alive()
            .flat_map(|a| self.adj[a].iter().filter(move |&&b| b > a).map(move |&b| (a, b)))
            .collect();
        for (a, b) in pairs {
            out.push((self.divergence(a, b)?, a, b));
        }
        out.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        Ok(out)
    }

    /// One sweep over the edges in ascending d_B order, using the statistics
    /// computed before the sweep. Returns the number of merges.
    fn merge_divergent_sweep(&mut self) -> Result<usize> {
        let edges = self.edges()?;
        let mut root: Vec<usize> = (0..self.groups.len()).collect();
        fn find(root: &mut [usize], mut x: usize) -> usize {
            while root[x] != x {
                root[x] = root[root[x]];
                x = root[x];
            }
            x
        }
        let mut merges = 0;
        for (d, a, b) in edges {
            if !(d < self.config.db_threshold) {
                break;
            }
            let (ra, rb) = (find(&mut root, a), find(&mut root, b));
            if ra == rb {
                continue;
            }
            let (keep, drop) = (ra.min(rb), ra.max(rb));
            root[drop] = keep;
            self.merge(keep, drop);
            merges += 1;
        }
        Ok(merges)
    }

    /// Merges the single closest pair at a time with refreshed statistics.
    fn merge_divergent_fixpoint(&mut self) -> Result<()> {
        loop {
            let edges = self.edges()?;
            match edges.first() {
                Some(&(d, a, b)) if d < self.config.db_threshold => self.merge(a, b),
                _ => return Ok(()),
            }
        }
    }
}

/// Edges between groups: 4-adjacency on a pixel grid, otherwise mode pairs
/// within a radius doubled from the median pairwise mode distance until the
/// graph is connected.
fn build_adjacency(store: &PointStore, labels: &[usize], modes: &[Vec<f64>]) -> Vec<BTreeSet<usize>> {
    let k = modes.len();
    let mut adj = vec![BTreeSet::new(); k];
    if let Some(grid) = store.grid() {
        for p in 0..grid.len() {
            for q in grid.neighbors4(p) {
                let (a, b) = (labels[p], labels[q]);
                if a != b {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
        }
        return adj;
    }
    if k < 2 {
        return adj;
    }
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let d = modes[a].iter().zip(&modes[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            dists.push((d, a, b));
        }
    }
    let mut sorted: Vec<f64> = dists.iter().map(|t| t.0).collect();
    sorted.sort_by(f64::total_cmp);
    let mut r = sorted[sorted.len() / 2];
    if !(r > 0.0) {
        r = sorted.iter().copied().find(|&d| d > 0.0).unwrap_or(1.0);
    }
    loop {
        let mut root: Vec<usize> = (0..k).collect();
        fn find(root: &mut [usize], mut x: usize) -> usize {
            while root[x] != x {
                root[x] = root[root[x]];
                x = root[x];
            }
            x
        }
        let mut components = k;
        for &(d, a, b) in &dists {
            if d <= r {
                let (ra, rb) = (find(&mut root, a), find(&mut root, b));
                if ra != rb {
                    root[ra.max(rb)] = ra.min(rb);
                    components -= 1;
                }
            }
        }
        if components == 1 {
            break;
        }
        r *= 2.0;
    }
    for &(d, a, b) in &dists {
        if d <= r {
            adj[a].insert(b);
            adj[b].insert(a);
        }
    }
    adj
}

/// Cleans up an arbitrary labeling whose groups carry a mode location.
/// `mode_of(key)` gives the mode for each distinct key in `keys`.
pub fn postprocess_labels(
    store: &PointStore,
    keys: &[usize],
    mut mode_of: impl FnMut(usize) -> Vec<f64>,
    density: &DensityField,
    config: &PostprocessConfig,
) -> Result<Partition> {
    if keys.len() != store.len() {
        return Err(Error::DimensionMismatch { expected: store.len(), got: keys.len() });
    }
    if config.xi.len() != store.domains().block_count() {
        return Err(Error::DimensionMismatch { expected: store.domains().block_count(), got: config.xi.len() });
    }
    let block = match config.db_block {
        Some(k) => store
            .domains()
            .ranges()
            .nth(k)
            .ok_or_else(|| contract(format!("no domain block {k}")))?,
        None => 0..store.dim(),
    };
    let (labels, order) = compact_labels(keys);
    let mut modes: Vec<Vec<f64>> = order.iter().map(|&k| mode_of(k)).collect();
    let mut members = vec![Vec::new(); order.len()];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }

    // contiguity: split fragments and give each fragment its densest member as mode
    let labels = match store.grid() {
        Some(grid) => {
            let comp = connected_components(&labels, grid);
            let count = comp.iter().copied().max().map_or(0, |m| m + 1);
            let mut parts = vec![0usize; order.len()];
            let mut first_label = vec![usize::MAX; count];
            for (i, &c) in comp.iter().enumerate() {
                if first_label[c] == usize::MAX {
                    first_label[c] = labels[i];
                    parts[labels[i]] += 1;
                }
            }
            let mut comp_members = vec![Vec::new(); count];
            for (i, &c) in comp.iter().enumerate() {
                comp_members[c].push(i);
            }
            modes = (0..count)
                .map(|c| {
                    let l = first_label[c];
                    if parts[l] == 1 {
                        modes[l].clone()
                    } else {
                        let best = *comp_members[c]
                            .iter()
                            .max_by(|&&a, &&b| density.get(a).total_cmp(&density.get(b)).then(b.cmp(&a)))
                            .unwrap();
                        store.point(best).to_vec()
                    }
                })
                .collect();
            members = comp_members;
            comp
        }
        None => labels,
    };

    let rho: Vec<f64> = modes
        .iter()
        .zip(&members)
        .map(|(_, m)| m.iter().map(|&i| density.get(i)).fold(0.0, f64::max))
        .collect();
    let adj = build_adjacency(store, &labels, &modes);
    let groups = members
        .into_iter()
        .zip(modes)
        .zip(rho)
        .map(|((members, mode), rho)| Some(Group { members, mode, rho, stats: None }))
        .collect();
    let mut graph = Graph { store, density, config, groups, adj, block };
    graph.merge_small()?;
    if config.fixpoint {
        graph.merge_divergent_fixpoint()?;
    } else {
        graph.merge_divergent_sweep()?;
    }

    let mut final_key = vec![0usize; store.len()];
    let live: Vec<usize> = graph.alive().collect();
    for &g in &live {
        for &i in &graph.group(g).members {
            final_key[i] = g;
        }
    }
    let mut described = std::collections::HashMap::new();
    for &g in &live {
        let bw = graph.stats(g)?;
        described.insert(g, (graph.group(g).mode.clone(), bw));
    }
    Ok(Partition::from_keys(&final_key, |g| described[&g].clone()))
}

/// Post-processes an agglomerator run.
pub fn postprocess(store: &PointStore, result: &RunResult, config: &PostprocessConfig) -> Result<Partition> {
    let modes: std::collections::HashMap<usize, Vec<f64>> =
        result.clusters.iter().map(|c| (c.id, c.mode.clone())).collect();
    postprocess_labels(store, &result.labels, |k| modes[&k].clone(), &result.density, config)
}

/// [`bhattacharyya`] over two SPD blocks.
pub fn block_divergence(mu_a: &[f64], a: &SpdMatrix, mu_b: &[f64], b: &SpdMatrix) -> Result<f64> {
    bhattacharyya(mu_a, a.matrix(), mu_b, b.matrix())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_index, compute_density};
    use crate::geometry::KernelProfile;
    use approx::assert_relative_eq;

    fn eye(d: usize, s: f64) -> DMatrix<f64> {
        DMatrix::identity(d, d) * s
    }

    #[test]
    fn bhattacharyya_identical_is_zero() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(bhattacharyya(&[1.0, 2.0], &s, &[1.0, 2.0], &s).unwrap(), 0.0);
    }

    #[test]
    fn bhattacharyya_shared_covariance_is_scaled_mahalanobis() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let d = bhattacharyya(&[0.0, 0.0], &s, &[1.0, -1.0], &s).unwrap();
        let diff = DVector::from_column_slice(&[-1.0, 1.0]);
        let m = diff.dot(&(s.clone().try_inverse().unwrap() * &diff));
        assert_relative_eq!(d, m / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn bhattacharyya_isotropic_oracle() {
        // μ_a=0, μ_b=(1,0), Σ_a=I, Σ_b=4I: S=2.5I
        // (1/8)(1/2.5) + ½ ln(6.25 / √16) = 0.05 + ½ ln(1.5625)
        let d = bhattacharyya(&[0.0, 0.0], &eye(2, 1.0), &[1.0, 0.0], &eye(2, 4.0)).unwrap();
        assert_relative_eq!(d, 0.05 + 0.5 * 1.5625f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn bhattacharyya_singular_average_rejected() {
        let z = DMatrix::zeros(2, 2);
        assert!(bhattacharyya(&[0.0, 0.0], &z, &[0.0, 0.0], &z).is_err());
    }

    #[test]
    fn standalone_singleton_is_floor() {
        let store = PointStore::new(vec![1.0, 2.0, 5.0, 5.0], 2).unwrap();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[1.0], &idx, &KernelProfile::gaussian()).unwrap();
        let (mu, bw) = standalone_covariance(&store, &[0], &rho, &[1e-3]).unwrap();
        assert_eq!(mu, vec![1.0, 2.0]);
        assert_relative_eq!(bw.to_dense(), eye(2, 1e-3), epsilon = 1e-15);
    }

    #[test]
    fn standalone_weighted_oracle() {
        let pts: Vec<f64> = (0..30).flat_map(|i| {
            let t = i as f64;
            [t.sin() * 2.0 + 0.1 * t, (0.7 * t).cos()]
        }).collect();
        let store = PointStore::new(pts.clone(), 2).unwrap();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[0.8], &idx, &KernelProfile::gaussian()).unwrap();
        let members: Vec<usize> = (0..30).collect();
        let xi = 1e-4;
        let (mu, bw) = standalone_covariance(&store, &members, &rho, &[xi]).unwrap();
        // two-pass weighted covariance
        let w: Vec<f64> = (0..30).map(|i| rho.get(i)).collect();
        let wt: f64 = w.iter().sum();
        let m = [0, 1].map(|k| (0..30).map(|i| w[i] * pts[2 * i + k]).sum::<f64>() / wt);
        let mut c = DMatrix::zeros(2, 2);
        for i in 0..30 {
            for a in 0..2 {
                for b in 0..2 {
                    c[(a, b)] += w[i] * (pts[2 * i + a] - m[a]) * (pts[2 * i + b] - m[b]) / wt;
                }
            }
        }
        c += eye(2, xi);
        assert_relative_eq!(mu[0], m[0], epsilon = 1e-12);
        assert_relative_eq!(mu[1], m[1], epsilon = 1e-12);
        assert_relative_eq!(bw.to_dense(), c, epsilon = 1e-10);
    }

    #[test]
    fn components_split_disjoint_blocks() {
        let grid = PixelGrid { width: 5, height: 2 };
        let labels = vec![0, 0, 1, 0, 0, 0, 0, 1, 0, 0];
        let comp = connected_components(&labels, grid);
        assert_eq!(comp, vec![0, 0, 1, 2, 2, 0, 0, 1, 2, 2]);
    }

    fn two_blob_store() -> PointStore {
        let mut pts = Vec::new();
        for i in 0..20 {
            let t = i as f64 * 0.05;
            pts.extend([t, 0.0]);
            pts.extend([10.0 + t, 0.0]);
        }
        PointStore::new(pts, 2).unwrap()
    }

    #[test]
    fn min_size_one_zero_threshold_is_identity() {
        let store = two_blob_store();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[0.5], &idx, &KernelProfile::gaussian()).unwrap();
        let keys: Vec<usize> = (0..store.len()).map(|i| i % 4).collect();
        let cfg = PostprocessConfig { min_size: 1, db_threshold: 0.0, ..PostprocessConfig::new(vec![1e-4]) };
        let p = postprocess_labels(&store, &keys, |k| store.point(k).to_vec(), &rho, &cfg).unwrap();
        assert_eq!(p.labels, compact_labels(&keys).0);
    }

    #[test]
    fn identical_adjacent_groups_merge() {
        // two groups that are mirror copies of the same points
        let mut pts = Vec::new();
        for i in 0..12 {
            pts.extend([(i % 4) as f64, (i / 4) as f64]);
        }
        let store = PointStore::new([pts.clone(), pts].concat(), 2).unwrap();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[1.0], &idx, &KernelProfile::gaussian()).unwrap();
        let keys: Vec<usize> = (0..24).map(|i| if i < 12 { 0 } else { 12 }).collect();
        let cfg = PostprocessConfig { min_size: 1, db_threshold: 1e-9, ..PostprocessConfig::new(vec![1e-4]) };
        let p = postprocess_labels(&store, &keys, |_| vec![1.5, 1.0], &rho, &cfg).unwrap();
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn small_groups_absorbed() {
        let store = two_blob_store();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[0.5], &idx, &KernelProfile::gaussian()).unwrap();
        // blob A intact, blob B with a stray group of 3
        let keys: Vec<usize> = (0..store.len())
            .map(|i| if i % 2 == 0 { 0 } else if i < 6 { 1 } else { 3 })
            .collect();
        let cfg = PostprocessConfig { min_size: 5, db_threshold: 0.0, ..PostprocessConfig::new(vec![1e-4]) };
        let p = postprocess_labels(&store, &keys, |k| store.point(k).to_vec(), &rho, &cfg).unwrap();
        assert_eq!(p.sizes, vec![20, 20]);
    }
}
