use serde::Serialize;

use crate::geometry::Bandwidth;

/// Final labeling: compact labels `0..k`, one mode, bandwidth and size per label.
#[derive(Debug, Clone)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub modes: Vec<Vec<f64>>,
    pub bandwidths: Vec<Bandwidth>,
    pub sizes: Vec<usize>,
}

impl Partition {
    /// Builds a partition from arbitrary per-point keys. Labels are assigned in
    /// order of first appearance; `describe(key)` supplies mode and bandwidth.
    pub fn from_keys(keys: &[usize], mut describe: impl FnMut(usize) -> (Vec<f64>, Bandwidth)) -> Self {
        let (labels, order) = compact_labels(keys);
        let mut sizes = vec![0; order.len()];
        for &l in &labels {
            sizes[l] += 1;
        }
        let (modes, bandwidths) = order.iter().map(|&k| describe(k)).unzip();
        Self { labels, modes, bandwidths, sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.labels.len()
    }

    /// Points of each cluster, in ascending point order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Relabels arbitrary keys to `0..k` by first appearance. Returns the labels and
/// the original key of each new label.
pub fn compact_labels(keys: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut map = std::collections::HashMap::new();
    let mut order = Vec::new();
    let labels = keys
        .iter()
        .map(|&k| {
            *map.entry(k).or_insert_with(|| {
                order.push(k);
                order.len() - 1
            })
        })
        .collect();
    (labels, order)
}

/// Serializable per-cluster record.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterRecord {
    pub id: usize,
    pub size: usize,
    pub mode: Vec<f64>,
    /// Dense bandwidth, row-major rows.
    pub sigma: Vec<Vec<f64>>,
}

impl Partition {
    pub fn records(&self) -> Vec<ClusterRecord> {
        (0..self.len())
            .map(|k| {
                let dense = self.bandwidths[k].to_dense();
                ClusterRecord {
                    id: k,
                    size: self.sizes[k],
                    mode: self.modes[k].clone(),
                    sigma: dense.row_iter().map(|r| r.iter().copied().collect()).collect(),
                }
            })
            .collect()
    }
}
