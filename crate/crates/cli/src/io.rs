use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use aaams::dataset::io::{read_binary, read_csv};
use aaams::imaging::{emit_segmentation, image_to_features, load_rgb, read_label_map};
use aaams::metrics::MetricReport;
use aaams::{Domains, Partition, PixelGrid, PointStore};
use anyhow::{bail, Context, Result};
use serde::Serialize;

pub struct Dataset {
    pub store: PointStore,
    pub grid: Option<PixelGrid>,
}

impl Dataset {
    pub fn is_image(&self) -> bool {
        self.grid.is_some()
    }
}

/// Loads either a point file (`.csv`, otherwise the binary layout) or an image.
pub fn load(input: Option<&Path>, image: Option<&Path>, domains: Option<&[usize]>) -> Result<Dataset> {
    match (input, image) {
        (Some(path), None) => {
            let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
            let (data, dim) = if is_csv { read_csv(path) } else { read_binary(path) }
                .with_context(|| format!("reading {}", path.display()))?;
            let domains = match domains {
                Some(sizes) => Domains::from_sizes(sizes.to_vec())?,
                None => Domains::single(dim),
            };
            if domains.dim() != dim {
                bail!("--domains sums to {} but the points have {dim} coordinates", domains.dim());
            }
            Ok(Dataset { store: PointStore::with_domains(data, domains)?, grid: None })
        }
        (None, Some(path)) => {
            if domains.is_some() {
                bail!("--domains does not apply to images");
            }
            let img = load_rgb(path).with_context(|| format!("reading {}", path.display()))?;
            let store = image_to_features(&img)?;
            let grid = store.grid();
            Ok(Dataset { store, grid })
        }
        (None, None) => bail!("one of --input or --image is required"),
        (Some(_), Some(_)) => bail!("--input and --image are mutually exclusive"),
    }
}

/// Ground truth: a label image for image input, otherwise one integer per
/// line (first column of a CSV row).
pub fn load_truth(path: &Path, data: &Dataset) -> Result<Vec<usize>> {
    let labels = if let Some(grid) = data.grid {
        let (labels, g) = read_label_map(path).with_context(|| format!("reading {}", path.display()))?;
        if g != grid {
            bail!("ground truth is {}x{}, image is {}x{}", g.width, g.height, grid.width, grid.height);
        }
        labels
    } else {
        let reader = BufReader::new(File::open(path).with_context(|| format!("reading {}", path.display()))?);
        let mut labels = Vec::new();
        for (no, line) in reader.lines().enumerate() {
            let line = line?;
            let field = line.split(',').next().unwrap_or("").trim();
            if field.is_empty() || field.starts_with('#') {
                continue;
            }
            match field.parse::<usize>() {
                Ok(v) => labels.push(v),
                Err(_) if no == 0 => continue,
                Err(_) => bail!("{}:{}: not a label: {field}", path.display(), no + 1),
            }
        }
        labels
    };
    if labels.len() != data.store.len() {
        bail!("ground truth has {} labels for {} points", labels.len(), data.store.len());
    }
    Ok(labels)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "label")?;
    for l in labels {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// One row per principal axis of every bandwidth block. `center` is the mode
/// restricted to the block; lists are `;`-separated.
pub fn write_ellipses(path: &Path, partition: &Partition) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "cluster,block,axis,size,eigenvalue,center,direction")?;
    for k in 0..partition.len() {
        let mut start = 0;
        for (b, block) in partition.bandwidths[k].blocks().iter().enumerate() {
            let dim = block.dim();
            let center = join(partition.modes[k][start..start + dim].iter().copied());
            for axis in 0..dim {
                let dir = join(block.eigenvectors().column(axis).iter().copied());
                writeln!(w, "{k},{b},{axis},{},{},{center},{dir}", partition.sizes[k], block.eigenvalues()[axis])?;
            }
            start += dim;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
pub struct Summary<'a> {
    pub algo: &'a str,
    pub points: usize,
    pub raw_cluster_count: usize,
    pub cluster_count: usize,
    pub iterations: Option<usize>,
    pub max_iterations_reached: Option<bool>,
    pub postprocessed: bool,
}

pub struct Outputs<'a> {
    pub dir: &'a Path,
}

impl Outputs<'_> {
    pub fn partition(&self, partition: &Partition, data: &Dataset) -> Result<()> {
        write_labels(&self.dir.join("labels.csv"), &partition.labels)?;
        write_json(&self.dir.join("clusters.json"), &partition.records())?;
        write_ellipses(&self.dir.join("ellipses.csv"), partition)?;
        if let Some(grid) = data.grid {
            emit_segmentation(partition, grid, &self.dir.join("labels.png"), &self.dir.join("segments.png"))?;
        }
        Ok(())
    }

    pub fn metrics(&self, report: &MetricReport) -> Result<()> {
        write_json(&self.dir.join("metrics.json"), report)
    }
}
