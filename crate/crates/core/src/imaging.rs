//! Image ingestion, sRGB ⇄ CIELAB conversion and segmentation output.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{PixelGrid, PointStore};
use crate::error::{contract, Result};
use crate::geometry::Domains;
use crate::partition::Partition;

// D65 reference white, consistent with the sRGB matrix rows below.
const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];
const EPS: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let f = |row: usize| {
        let v = RGB_TO_XYZ[row].iter().zip(&lin).map(|(m, c)| m * c).sum::<f64>() / WHITE[row];
        if v > EPS {
            v.cbrt()
        } else {
            (KAPPA * v + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(0), f(1), f(2));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab`]; out-of-gamut colors are clipped.
pub fn lab_to_rgb(lab: [f64; 3]) -> [u8; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let inv = |f: f64| {
        let f3 = f * f * f;
        if f3 > EPS {
            f3
        } else {
            (116.0 * f - 16.0) / KAPPA
        }
    };
    let xyz = [inv(fx) * WHITE[0], inv(fy) * WHITE[1], inv(fz) * WHITE[2]];
    let mut out = [0u8; 3];
    for (row, o) in out.iter_mut().enumerate() {
        let lin: f64 = XYZ_TO_RGB[row].iter().zip(&xyz).map(|(m, c)| m * c).sum();
        *o = (linear_to_srgb(lin.clamp(0.0, 1.0)) * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    out
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Joint-domain features `(L, a, b, row, col)` in row-major pixel order.
pub fn image_to_features(img: &RgbImage) -> Result<PointStore> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(contract("empty image"));
    }
    let mut data = Vec::with_capacity(w as usize * h as usize * 5);
    for row in 0..h {
        for col in 0..w {
            let p = img.get_pixel(col, row).0;
            data.extend(rgb_to_lab(p));
            data.extend([row as f64, col as f64]);
        }
    }
    PointStore::with_domains(data, Domains::joint(3, 2))?
        .with_grid(PixelGrid { width: w as usize, height: h as usize })
}

/// Each pixel painted with its cluster mode's color.
pub fn segment_image(partition: &Partition, grid: PixelGrid) -> Result<RgbImage> {
    if partition.point_count() != grid.len() {
        return Err(contract("partition does not cover the image"));
    }
    let colors: Vec<[u8; 3]> = partition.modes.iter().map(|m| lab_to_rgb([m[0], m[1], m[2]])).collect();
    Ok(ImageBuffer::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        Rgb(colors[partition.labels[grid.index(y as usize, x as usize)]])
    }))
}

/// Labels as a 16-bit grayscale image.
pub fn label_image(labels: &[usize], grid: PixelGrid) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    if labels.len() != grid.len() {
        return Err(contract("label count does not match the image"));
    }
    let data = labels
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| contract("more than 65536 labels")))
        .collect::<Result<Vec<u16>>>()?;
    Ok(ImageBuffer::from_raw(grid.width as u32, grid.height as u32, data).expect("sized buffer"))
}

/// Writes the label map and segment image. The format follows each path's
/// extension (`.png`, `.pgm`, `.ppm`).
pub fn emit_segmentation(partition: &Partition, grid: PixelGrid, label_path: &Path, segment_path: &Path) -> Result<()> {
    label_image(&partition.labels, grid)?.save(label_path)?;
    segment_image(partition, grid)?.save(segment_path)?;
    Ok(())
}

/// Reads a label map. Gray images use their values; color images get one
/// label per distinct color in raster order of first appearance.
pub fn read_label_map(path: &Path) -> Result<(Vec<usize>, PixelGrid)> {
    let img = image::open(path)?;
    let grid = PixelGrid { width: img.width() as usize, height: img.height() as usize };
    let labels = match img {
        image::DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as usize).collect(),
        image::DynamicImage::ImageLuma16(g) => g.pixels().map(|p| p.0[0] as usize).collect(),
        other => {
            let rgb = other.to_rgb8();
            let keys: Vec<usize> = rgb
                .pixels()
                .map(|p| ((p.0[0] as usize) << 16) | ((p.0[1] as usize) << 8) | p.0[2] as usize)
                .collect();
            crate::partition::compact_labels(&keys).0
        }
    };
    Ok((labels, grid))
}

/// Per-segment record of the cluster dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: usize,
    pub size: usize,
    pub mode_lab: [f64; 3],
    pub mode_xy: [f64; 2],
    pub sigma_r: [[f64; 3]; 3],
    pub sigma_s: [[f64; 2]; 2],
}

pub fn segment_records(partition: &Partition) -> Result<Vec<SegmentRecord>> {
    (0..partition.len())
        .map(|k| {
            let m = &partition.modes[k];
            let blocks = partition.bandwidths[k].blocks();
            if m.len() != 5 || blocks.len() != 2 {
                return Err(contract("segment records need (L, a, b, row, col) clusters"));
            }
            let r = blocks[0].matrix();
            let s = blocks[1].matrix();
            Ok(SegmentRecord {
                id: k,
                size: partition.sizes[k],
                mode_lab: [m[0], m[1], m[2]],
                // x is the column, y the row
                mode_xy: [m[4], m[3]],
                sigma_r: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
                sigma_s: std::array::from_fn(|i| std::array::from_fn(|j| s[(i, j)])),
            })
        })
        .collect()
}
