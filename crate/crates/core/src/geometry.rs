//! Kernel profiles, Mahalanobis metrics and guarded symmetric-matrix operations.
//!
//! Kernels are written in terms of their *profile* `K(t)` evaluated at the squared
//! Mahalanobis distance `t`. The mean-shift weight of a sample is `|K'(t)|`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Relative tolerance used when checking symmetry of user-supplied matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Epanechnikov,
}

/// A radially symmetric kernel profile truncated at a Mahalanobis radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelProfile {
    pub family: KernelFamily,
    /// Cutoff in Mahalanobis units; the profile vanishes for `t > support_radius²`.
    pub support_radius: f64,
}

impl Default for KernelProfile {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl KernelProfile {
    pub fn gaussian() -> Self {
        Self {
            family: KernelFamily::Gaussian,
            support_radius: 3.0,
        }
    }

    pub fn epanechnikov() -> Self {
        Self {
            family: KernelFamily::Epanechnikov,
            support_radius: 1.0,
        }
    }

    /// Squared cutoff, compared against squared Mahalanobis distances.
    #[inline]
    pub fn cutoff(&self) -> f64 {
        self.support_radius * self.support_radius
    }

    /// Profile value `K(t)`, zero outside the support.
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        if t > self.cutoff() {
            return 0.0;
        }
        match self.family {
            KernelFamily::Gaussian => (-0.5 * t).exp(),
            KernelFamily::Epanechnikov => 1.0 - t / self.cutoff(),
        }
    }

    /// Mean-shift weight `|K'(t)|`, zero outside the support.
    #[inline]
    pub fn weight(&self, t: f64) -> f64 {
        if t > self.cutoff() {
            return 0.0;
        }
        match self.family {
            KernelFamily::Gaussian => 0.5 * (-0.5 * t).exp(),
            KernelFamily::Epanechnikov => 1.0 / self.cutoff(),
        }
    }

    /// Product-kernel weight for a multi-domain point: `|K'(t_0)| · Π_{b>0} K(t_b)`.
    ///
    /// With a single block this is just [`KernelProfile::weight`].
    #[inline]
    pub fn joint_weight(&self, block_t: &[f64]) -> f64 {
        let (first, rest) = match block_t.split_first() {
            Some(split) => split,
            None => return 0.0,
        };
        let mut w = self.weight(*first);
        for &t in rest {
            if w == 0.0 {
                break;
            }
            w *= self.value(t);
        }
        w
    }

    /// Product-kernel density value `Π_b K(t_b)`.
    #[inline]
    pub fn joint_value(&self, block_t: &[f64]) -> f64 {
        let mut v = 1.0;
        for &t in block_t {
            v *= self.value(t);
            if v == 0.0 {
                break;
            }
        }
        v
    }
}

/// Mean-shift weight `|K'(t)|` with argument checking.
pub fn kernel_weight(t: f64, profile: &KernelProfile) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(contract(format!("kernel argument must be >= 0, got {t}")));
    }
    Ok(profile.weight(t))
}

/// Symmetric positive-definite matrix with cached inverse, log-determinant and
/// eigendecomposition.
///
/// Instances are immutable; every constructor fills the caches.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    dim: usize,
    entries: DMatrix<f64>,
    /// Row-major inverse, used on the hot path.
    inverse: Vec<f64>,
    log_det: f64,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl SpdMatrix {
    /// `scale · I_dim`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(contract(format!("identity scale must be > 0, got {scale}")));
        }
        Self::from_diagonal(&vec![scale; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if diag.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(contract("diagonal entries must be positive and finite"));
        }
        let dim = diag.len();
        let entries = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
        let mut inverse = vec![0.0; dim * dim];
        for (i, &v) in diag.iter().enumerate() {
            inverse[i * dim + i] = 1.0 / v;
        }
        Ok(Self {
            dim,
            entries,
            inverse,
            log_det: diag.iter().map(|v| v.ln()).sum(),
            eigenvalues: DVector::from_column_slice(diag),
            eigenvectors: DMatrix::identity(dim, dim),
        })
    }

    /// Wraps a matrix that must already be symmetric positive definite.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        let m = symmetrize(&m);
        let eig = SymmetricEigen::new(m.clone());
        if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(contract("matrix is not positive definite"));
        }
        Ok(Self::from_parts(m, eig.eigenvalues, eig.eigenvectors))
    }

    fn from_parts(entries: DMatrix<f64>, eigenvalues: DVector<f64>, eigenvectors: DMatrix<f64>) -> Self {
        let dim = entries.nrows();
        let inv_diag = DMatrix::from_diagonal(&eigenvalues.map(|l| 1.0 / l));
        let inv = symmetrize(&(&eigenvectors * inv_diag * eigenvectors.transpose()));
        let mut inverse = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                inverse[r * dim + c] = inv[(r, c)];
            }
        }
        let log_det = eigenvalues.iter().map(|l| l.ln()).sum();
        Self {
            dim,
            entries,
            inverse,
            log_det,
            eigenvalues,
            eigenvectors,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.inverse)
    }

    #[inline]
    pub fn inverse_row_major(&self) -> &[f64] {
        &self.inverse
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Eigenvectors as columns, matching the order of [`SpdMatrix::eigenvalues`].
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.min()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.max()
    }

    /// `(x-y)ᵀ S⁻¹ (x-y)` without argument checks.
    #[inline]
    pub fn quad_diff(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dim;
        let inv = &self.inverse;
        let mut acc = 0.0;
        for i in 0..d {
            let di = x[i] - y[i];
            let row = &inv[i * d..(i + 1) * d];
            let mut s = row[i] * di;
            for j in (i + 1)..d {
                s += 2.0 * row[j] * (x[j] - y[j]);
            }
            acc += di * s;
        }
        acc.max(0.0)
    }
}

/// Squared Mahalanobis distance `(x-y)ᵀ s⁻¹ (x-y)`.
pub fn mahalanobis_sq(x: &[f64], y: &[f64], s: &SpdMatrix) -> Result<f64> {
    if x.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: x.len() });
    }
    if y.len() != s.dim() {
        return Err(Error::DimensionMismatch { expected: s.dim(), got: y.len() });
    }
    Ok(s.quad_diff(x, y))
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(contract(format!("matrix is {}x{}, not square", m.nrows(), m.ncols())));
    }
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    for r in 0..m.nrows() {
        for c in (r + 1)..m.ncols() {
            if (m[(r, c)] - m[(c, r)]).abs() > SYMMETRY_TOL * scale {
                return Err(contract(format!("matrix not symmetric at ({r},{c})")));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(contract("matrix has non-finite entries"));
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalue clamp: every eigenvalue below `floor` is raised to `floor`.
///
/// A matrix that already satisfies the floor is returned with its entries intact.
pub fn clamp_spd(m: &DMatrix<f64>, floor: f64) -> Result<SpdMatrix> {
    if !(floor > 0.0) {
        return Err(contract(format!("eigenvalue floor must be > 0, got {floor}")));
    }
    check_symmetric(m)?;
    let m = symmetrize(m);
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return Ok(SpdMatrix::from_parts(m, eig.eigenvalues, eig.eigenvectors));
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = symmetrize(&(v * DMatrix::from_diagonal(&clamped) * v.transpose()));
    Ok(SpdMatrix::from_parts(rebuilt, clamped, eig.eigenvectors))
}

/// Feature-space layout: consecutive blocks of coordinates that carry
/// independent kernels (one block for single-domain data, range then spatial
/// for joint-domain data).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domains {
    sizes: Vec<usize>,
}

impl Domains {
    pub fn single(dim: usize) -> Self {
        Self { sizes: vec![dim] }
    }

    pub fn joint(range: usize, spatial: usize) -> Self {
        Self { sizes: vec![range, spatial] }
    }

    pub fn from_sizes(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(contract("domain blocks must be nonempty"));
        }
        Ok(Self { sizes })
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn block_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn is_joint(&self) -> bool {
        self.sizes.len() > 1
    }

    /// Coordinate ranges of each block.
    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.sizes.iter().scan(0usize, |start, &len| {
            let r = *start..*start + len;
            *start += len;
            Some(r)
        })
    }
}

/// Block-diagonal bandwidth: one SPD block per domain, no cross-domain coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidth {
    blocks: Vec<SpdMatrix>,
}

impl Bandwidth {
    pub fn from_blocks(blocks: Vec<SpdMatrix>) -> Self {
        assert!(!blocks.is_empty());
        Self { blocks }
    }

    pub fn single(block: SpdMatrix) -> Self {
        Self { blocks: vec![block] }
    }

    /// `diag(σ_0² I, σ_1² I, …)` with one variance per domain block.
    pub fn isotropic(domains: &Domains, variances: &[f64]) -> Result<Self> {
        if variances.len() != domains.block_count() {
            return Err(Error::DimensionMismatch {
                expected: domains.block_count(),
                got: variances.len(),
            });
        }
        let blocks = domains
            .sizes()
            .iter()
            .zip(variances)
            .map(|(&d, &v)| SpdMatrix::scaled_identity(d, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[SpdMatrix] {
        &self.blocks
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(SpdMatrix::dim).sum()
    }

    pub fn log_det(&self) -> f64 {
        self.blocks.iter().map(SpdMatrix::log_det).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.blocks.iter().map(SpdMatrix::min_eigenvalue).fold(f64::INFINITY, f64::min)
    }

    /// Writes the squared Mahalanobis distance of each block into `out`.
    #[inline]
    pub fn block_distances(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let mut start = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            let end = start + block.dim();
            out[b] = block.quad_diff(&x[start..end], &y[start..end]);
            start = end;
        }
    }

    /// Dense `d×d` matrix with exact zeros off the diagonal blocks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        self.assemble(|b| b.matrix().clone())
    }

    pub fn inverse_dense(&self) -> DMatrix<f64> {
        self.assemble(SpdMatrix::inverse)
    }

    fn assemble(&self, f: impl Fn(&SpdMatrix) -> DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let mut out = DMatrix::zeros(d, d);
        let mut start = 0;
        for block in &self.blocks {
            let k = block.dim();
            out.view_mut((start, start), (k, k)).copy_from(&f(block));
            start += k;
        }
        out
    }
}
