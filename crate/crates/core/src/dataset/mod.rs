//! Immutable point store, neighbor index, and the precomputed per-point
//! density field and first-iteration shift vectors.

pub mod io;
pub mod kdtree;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kdtree::KdTree;

use crate::error::{contract, Error, Result};
use crate::geometry::{Domains, KernelProfile};

/// Row-major pixel lattice backing a joint-domain store whose last block holds
/// `(row, col)` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
}

impl PixelGrid {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Pixel ids whose centre lies within `radius` of `(row, col)`, row-major.
    pub fn window(&self, row: f64, col: f64, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if radius < 0.0 {
            return out;
        }
        let r2 = radius * radius;
        let r0 = (row - radius).ceil().max(0.0) as usize;
        let r1 = (row + radius).floor().min(self.height as f64 - 1.0);
        let c0 = (col - radius).ceil().max(0.0) as usize;
        let c1 = (col + radius).floor().min(self.width as f64 - 1.0);
        if r1 < 0.0 || c1 < 0.0 {
            return out;
        }
        for r in r0..=r1 as usize {
            let dr = r as f64 - row;
            for c in c0..=c1 as usize {
                let dc = c as f64 - col;
                if dr * dr + dc * dc <= r2 {
                    out.push(self.index(r, c));
                }
            }
        }
        out
    }

    /// 4-connected neighbors of a pixel.
    pub fn neighbors4(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (id / self.width, id % self.width);
        let up = (r > 0).then(|| id - self.width);
        let down = (r + 1 < self.height).then(|| id + self.width);
        let left = (c > 0).then(|| id - 1);
        let right = (c + 1 < self.width).then(|| id + 1);
        [up, down, left, right].into_iter().flatten()
    }
}

/// The immutable data set `{x_i}`.
#[derive(Debug, Clone)]
pub struct PointStore {
    data: Vec<f64>,
    domains: Domains,
    grid: Option<PixelGrid>,
}

impl PointStore {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        Self::with_domains(data, Domains::single(dim))
    }

    pub fn with_domains(data: Vec<f64>, domains: Domains) -> Result<Self> {
        let dim = domains.dim();
        if dim == 0 || data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(contract(format!(
                "point buffer of length {} is not a nonempty multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(contract("points must be finite"));
        }
        Ok(Self { data, domains, grid: None })
    }

    /// Attaches a pixel lattice; the last domain block must hold exact `(row, col)`.
    pub fn with_grid(mut self, grid: PixelGrid) -> Result<Self> {
        if !self.domains.is_joint() || *self.domains.sizes().last().unwrap() != 2 {
            return Err(contract("grid stores need a 2-D spatial block"));
        }
        if grid.len() != self.len() {
            return Err(contract(format!("grid has {} pixels, store has {} points", grid.len(), self.len())));
        }
        let off = self.dim() - 2;
        for i in 0..self.len() {
            let p = self.point(i);
            if p[off] != (i / grid.width) as f64 || p[off + 1] != (i % grid.width) as f64 {
                return Err(contract(format!("point {i} does not sit on its pixel")));
            }
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let (data, dim) = io::read_csv(path)?;
        Self::new(data, dim)
    }

    pub fn from_binary(path: &Path) -> Result<Self> {
        let (data, dim) = io::read_binary(path)?;
        Self::new(data, dim)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.domains.dim()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn domains(&self) -> &Domains {
        &self.domains
    }

    pub fn grid(&self) -> Option<PixelGrid> {
        self.grid
    }

    /// Offset of the spatial block (the last block) inside a feature vector.
    pub fn spatial_offset(&self) -> usize {
        self.dim() - self.domains.sizes().last().copied().unwrap_or(0)
    }
}

/// Exact neighbor queries over a [`PointStore`] in raw feature coordinates.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    tree: KdTree,
    grid: Option<PixelGrid>,
    spatial_offset: usize,
}

pub fn build_index(store: &PointStore) -> NeighborIndex {
    NeighborIndex {
        tree: KdTree::build(store.data(), store.dim()),
        grid: store.grid(),
        spatial_offset: store.spatial_offset(),
    }
}

impl NeighborIndex {
    pub fn k_nearest(&self, q: &[f64], k: usize) -> Vec<usize> {
        self.tree.k_nearest(q, k).into_iter().map(|(id, _)| id).collect()
    }

    pub fn radius(&self, q: &[f64], r: f64) -> Vec<usize> {
        self.tree.within_radius(q, r).into_iter().map(|(id, _)| id).collect()
    }

    /// Nearest stored point; ties go to the lowest id.
    pub fn nearest(&self, q: &[f64]) -> usize {
        self.tree.nearest(q).map(|(id, _)| id).expect("index over a nonempty store")
    }

    pub fn grid(&self) -> Option<PixelGrid> {
        self.grid
    }

    /// Pixels within a spatial radius of the spatial part of `q`.
    pub fn spatial_window(&self, q: &[f64], radius: f64) -> Result<Vec<usize>> {
        let grid = self.grid.ok_or_else(|| contract("spatial window needs a pixel grid"))?;
        Ok(grid.window(q[self.spatial_offset], q[self.spatial_offset + 1], radius))
    }
}

/// Per-point density normalized so the maximum is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    rho: Vec<f64>,
}

impl DensityField {
    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.rho[i]
    }
}

/// Candidate points that may lie inside the product-kernel support of
/// `sigmas` around `q` (a superset; callers apply per-block truncation).
pub(crate) fn support_candidates(
    index: &NeighborIndex,
    q: &[f64],
    half_widths: &[f64],
) -> Vec<usize> {
    match index.grid() {
        Some(_) => {
            let spatial = *half_widths.last().unwrap();
            index.spatial_window(q, spatial).expect("grid present")
        }
        None => {
            let r = half_widths.iter().map(|h| h * h).sum::<f64>().sqrt();
            index.radius(q, r)
        }
    }
}

/// Kernel density at every stored point using the isotropic base bandwidth
/// (one `σ_base` per domain block), normalized by its maximum.
pub fn compute_density(
    store: &PointStore,
    sigma_base: &[f64],
    index: &NeighborIndex,
    profile: &KernelProfile,
) -> Result<DensityField> {
    let domains = store.domains();
    if sigma_base.len() != domains.block_count() {
        return Err(Error::DimensionMismatch { expected: domains.block_count(), got: sigma_base.len() });
    }
    if sigma_base.iter().any(|&s| !(s > 0.0)) {
        return Err(contract("sigma_base must be positive"));
    }
    let inv_var: Vec<f64> = sigma_base.iter().map(|s| 1.0 / (s * s)).collect();
    let half: Vec<f64> = sigma_base.iter().map(|s| s * profile.support_radius).collect();
    let ranges: Vec<_> = domains.ranges().collect();
    let raw: Vec<f64> = (0..store.len())
        .into_par_iter()
        .map(|i| {
            let xi = store.point(i);
            let mut t = vec![0.0; ranges.len()];
            support_candidates(index, xi, &half)
                .into_iter()
                .map(|j| {
                    let xj = store.point(j);
                    for (b, r) in ranges.iter().enumerate() {
                        t[b] = xi[r.clone()].iter().zip(&xj[r.clone()]).map(|(a, c)| (a - c) * (a - c)).sum::<f64>()
                            * inv_var[b];
                    }
                    profile.joint_value(&t)
                })
                .sum()
        })
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(contract("density vanished everywhere"));
    }
    Ok(DensityField { rho: raw.into_iter().map(|v| v / max).collect() })
}

/// Density at an arbitrary location, approximated by its nearest stored point.
pub fn density_at(q: &[f64], field: &DensityField, index: &NeighborIndex) -> f64 {
    field.get(index.nearest(q))
}

/// First-iteration mean-shift vectors `y^{τ=1} - y` of every point.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstShiftCache {
    dim: usize,
    shift: Vec<f64>,
}

impl FirstShiftCache {
    pub fn from_shifts(shift: Vec<f64>, dim: usize) -> Self {
        assert_eq!(shift.len() % dim, 0);
        Self { dim, shift }
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.shift[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.shift.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.shift.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_point_density_is_one() {
        let store = PointStore::new(vec![3.0, 4.0], 2).unwrap();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[1.0], &idx, &KernelProfile::gaussian()).unwrap();
        assert_eq!(rho.values(), &[1.0]);
    }

    #[test]
    fn symmetric_coincident_clusters() {
        let mut data = vec![0.0; 10];
        data.extend(vec![100.0; 10]);
        let store = PointStore::new(data, 1).unwrap();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[1.0], &idx, &KernelProfile::gaussian()).unwrap();
        assert!(rho.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn three_point_density_matches_direct_kde() {
        let pts = [0.0, 0.1, 10.0];
        let store = PointStore::new(pts.to_vec(), 1).unwrap();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[1.0], &idx, &KernelProfile::gaussian()).unwrap();
        // direct truncated KDE
        let kde = |x: f64| -> f64 {
            pts.iter()
                .map(|p| {
                    let t = (x - p) * (x - p);
                    if t > 9.0 {
                        0.0
                    } else {
                        (-0.5 * t).exp()
                    }
                })
                .sum()
        };
        let raw: Vec<f64> = pts.iter().map(|&p| kde(p)).collect();
        let max = raw.iter().cloned().fold(0.0, f64::max);
        for i in 0..3 {
            assert_relative_eq!(rho.get(i), raw[i] / max, epsilon = 1e-14);
        }
        assert!(rho.get(2) < rho.get(0));
        assert_eq!(rho.get(0), rho.get(1));
    }

    #[test]
    fn density_at_nearest_point() {
        let store = PointStore::new(vec![0.0, 1.0, 5.0], 1).unwrap();
        let idx = build_index(&store);
        let rho = compute_density(&store, &[1.0], &idx, &KernelProfile::gaussian()).unwrap();
        assert_eq!(density_at(&[1.0], &rho, &idx), rho.get(1));
        assert_eq!(density_at(&[0.4], &rho, &idx), rho.get(0));
        assert_eq!(density_at(&[3.1], &rho, &idx), rho.get(2));
    }

    #[test]
    fn grid_window_is_a_disc() {
        let g = PixelGrid { width: 5, height: 4 };
        let w = g.window(1.0, 1.0, 1.0);
        assert_eq!(w, vec![1, 5, 6, 7, 11]);
        assert_eq!(g.window(0.0, 0.0, 0.0), vec![0]);
        assert_eq!(g.neighbors4(0).collect::<Vec<_>>(), vec![5, 1]);
    }

    #[test]
    fn grid_store_validates_coordinates() {
        let data = vec![1.0, 0.0, 0.0, 2.0, 0.0, 1.0];
        let store = PointStore::with_domains(data.clone(), Domains::joint(1, 2)).unwrap();
        assert!(store.clone().with_grid(PixelGrid { width: 2, height: 1 }).is_ok());
        assert!(store.with_grid(PixelGrid { width: 1, height: 2 }).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(PointStore::new(vec![], 2).is_err());
        assert!(PointStore::new(vec![1.0, 2.0, 3.0], 2).is_err());
        let store = PointStore::new(vec![0.0], 1).unwrap();
        let idx = build_index(&store);
        assert!(compute_density(&store, &[0.0], &idx, &KernelProfile::gaussian()).is_err());
    }
}
