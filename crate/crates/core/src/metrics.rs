//! Partition comparison indices: PRI, VoI, GCE, BDE and ARI.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::PixelGrid;
use crate::error::{Error, Result};
use crate::partition::compact_labels;

struct Contingency {
    n: usize,
    cells: Vec<usize>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let (la, oa) = compact_labels(a);
    let (lb, ob) = compact_labels(b);
    let mut rows = vec![0; oa.len()];
    let mut cols = vec![0; ob.len()];
    let mut map: HashMap<(usize, usize), usize> = HashMap::new();
    for (&i, &j) in la.iter().zip(&lb) {
        rows[i] += 1;
        cols[j] += 1;
        *map.entry((i, j)).or_default() += 1;
    }
    Ok(Contingency { n: a.len(), cells: map.into_values().collect(), rows, cols })
}

fn pairs(k: usize) -> f64 {
    let k = k as f64;
    k * (k - 1.0) / 2.0
}

/// Fraction of point pairs on which both labelings agree.
pub fn pri(a: &[usize], b: &[usize]) -> Result<f64> {
    let c = contingency(a, b)?;
    let total = pairs(c.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let both: f64 = c.cells.iter().map(|&v| pairs(v)).sum();
    let same_a: f64 = c.rows.iter().map(|&v| pairs(v)).sum();
    let same_b: f64 = c.cols.iter().map(|&v| pairs(v)).sum();
    Ok((total + 2.0 * both - same_a - same_b) / total)
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&v| v > 0)
        .map(|v| {
            let p = v as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Variation of information in nats.
pub fn voi(a: &[usize], b: &[usize]) -> Result<f64> {
    let c = contingency(a, b)?;
    if c.n == 0 {
        return Ok(0.0);
    }
    let n = c.n as f64;
    let h_ab = entropy(c.cells.iter().copied(), n);
    let h_a = entropy(c.rows.iter().copied(), n);
    let h_b = entropy(c.cols.iter().copied(), n);
    Ok((2.0 * h_ab - h_a - h_b).max(0.0))
}

/// Global consistency error.
pub fn gce(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let (la, _) = compact_labels(a);
    let (lb, _) = compact_labels(b);
    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&i, &j) in la.iter().zip(&lb) {
        *cells.entry((i, j)).or_default() += 1;
        *rows.entry(i).or_default() += 1;
        *cols.entry(j).or_default() += 1;
    }
    let mut e_ab = 0.0;
    let mut e_ba = 0.0;
    for (&(i, j), &v) in &cells {
        let v = v as f64;
        let (ai, bj) = (rows[&i] as f64, cols[&j] as f64);
        e_ab += v * (ai - v) / ai;
        e_ba += v * (bj - v) / bj;
    }
    Ok(e_ab.min(e_ba) / a.len() as f64)
}

/// Adjusted Rand index (Hubert and Arabie).
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let c = contingency(a, b)?;
    let total = pairs(c.n);
    let index: f64 = c.cells.iter().map(|&v| pairs(v)).sum();
    let sa: f64 = c.rows.iter().map(|&v| pairs(v)).sum();
    let sb: f64 = c.cols.iter().map(|&v| pairs(v)).sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        // both labelings trivial in the same way
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Pixels whose right or lower neighbor carries a different label.
pub fn boundary_map(labels: &[usize], grid: PixelGrid) -> Vec<bool> {
    let (w, h) = (grid.width, grid.height);
    let mut out = vec![false; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let right = c + 1 < w && labels[i + 1] != labels[i];
            let down = r + 1 < h && labels[i + w] != labels[i];
            out[i] = right || down;
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn distance_transform_sq(mask: &[bool], grid: PixelGrid) -> Vec<f64> {
    let (w, h) = (grid.width, grid.height);
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            col[r] = d[r * w + c];
        }
        edt_1d(&col, &mut tmp[..h]);
        for r in 0..h {
            d[r * w + c] = tmp[r];
        }
    }
    for r in 0..h {
        let row = d[r * w..(r + 1) * w].to_vec();
        edt_1d(&row, &mut d[r * w..(r + 1) * w]);
    }
    d
}

/// Boundary displacement error in pixels: mean distance from each boundary
/// pixel of one map to the nearest boundary pixel of the other, averaged over
/// both directions. A side without boundaries is charged the image diagonal.
pub fn bde(a: &[usize], b: &[usize], grid: PixelGrid) -> Result<f64> {
    if a.len() != grid.len() || b.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), got: a.len().min(b.len()) });
    }
    let ba = boundary_map(a, grid);
    let bb = boundary_map(b, grid);
    let (na, nb) = (ba.iter().filter(|&&x| x).count(), bb.iter().filter(|&&x| x).count());
    if na == 0 && nb == 0 {
        return Ok(0.0);
    }
    let diag = ((grid.width * grid.width + grid.height * grid.height) as f64).sqrt();
    let one_way = |from: &[bool], n_from: usize, to: &[bool], n_to: usize| -> f64 {
        if n_from == 0 {
            return 0.0;
        }
        if n_to == 0 {
            return diag;
        }
        let dt = distance_transform_sq(to, grid);
        from.iter().zip(&dt).filter(|(&f, _)| f).map(|(_, d)| d.sqrt()).sum::<f64>() / n_from as f64
    };
    let ab = one_way(&ba, na, &bb, nb);
    let ba_ = one_way(&bb, nb, &ba, na);
    let sides = (na > 0) as usize + (nb > 0) as usize;
    Ok((ab + ba_) / sides as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pri: f64,
    pub gce: f64,
    pub voi: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bde: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    pub cluster_count: usize,
}

/// All indices of `labels` against `truth`; BDE only when a grid is given.
pub fn report(labels: &[usize], truth: &[usize], grid: Option<PixelGrid>) -> Result<MetricReport> {
    Ok(MetricReport {
        pri: pri(labels, truth)?,
        gce: gce(labels, truth)?,
        voi: voi(labels, truth)?,
        bde: grid.map(|g| bde(labels, truth, g)).transpose()?,
        ari: Some(ari(labels, truth)?),
        cluster_count: compact_labels(labels).1.len(),
    })
}
