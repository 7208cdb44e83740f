//! Non-overlapping tiling of source images into a tiny dataset, with
//! automated filters standing in for manual tile curation.

use std::fs;
use std::path::Path;

use cafpn_tensor::Tensor;
use log::warn;
use serde::Serialize;

use crate::data::image::{crop, load_image, luminance, save_image};
use crate::data::manifest::DatasetManifest;
use crate::error::{io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileFilters {
    /// Tiles whose luminance variance falls below this are blank.
    pub min_variance: f64,
    /// Tiles whose mean luminance lies within this of the image's border
    /// mean are background.
    pub background_delta: f64,
}

impl Default for TileFilters {
    fn default() -> Self {
        Self {
            min_variance: 1e-3,
            background_delta: 0.02,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TileVerdict {
    Kept,
    Blank,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub x0: usize,
    pub verdict: TileVerdict,
}

/// Top-left corners of the full `tile × tile` cells; remainders are dropped.
pub fn tile_grid(h: usize, w: usize, tile: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity((h / tile) * (w / tile));
    for r in 0..h / tile {
        for c in 0..w / tile {
            v.push((r * tile, c * tile));
        }
    }
    v
}

/// Mean luminance of the one-pixel frame around the image.
pub fn border_mean(lum: &[f64], h: usize, w: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                sum += lum[y * w + x];
                n += 1;
            }
        }
    }
    sum / n as f64
}

pub fn assess_tiles(img: &Tensor, tile: usize, filters: TileFilters) -> Vec<Tile> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let lum = luminance(img);
    let border = border_mean(&lum, h, w);
    let area = (tile * tile) as f64;
    tile_grid(h, w, tile)
        .into_iter()
        .map(|(y0, x0)| {
            let vals = (y0..y0 + tile).flat_map(|y| lum[y * w + x0..y * w + x0 + tile].iter());
            let mean = vals.clone().sum::<f64>() / area;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / area;
            let verdict = if var < filters.min_variance {
                TileVerdict::Blank
            } else if (mean - border).abs() < filters.background_delta {
                TileVerdict::Background
            } else {
                TileVerdict::Kept
            };
            Tile {
                row: y0 / tile,
                col: x0 / tile,
                y0,
                x0,
                verdict,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TinyReport {
    pub images: usize,
    pub undersized: usize,
    /// Tiles before filtering.
    pub raw_tiles: usize,
    pub kept: usize,
    pub blank: usize,
    pub background: usize,
    /// Kept tiles per class, in manifest class order.
    pub per_class: Vec<(String, usize)>,
}

/// Tiles every manifest image into `dst/<class>/<stem>_r{row}_c{col}.tnsr`.
pub fn generate_tiny(
    manifest: &DatasetManifest,
    dst: impl AsRef<Path>,
    tile: usize,
    filters: TileFilters,
) -> Result<TinyReport> {
    let dst = dst.as_ref();
    let mut report = TinyReport {
        per_class: manifest.classes.iter().map(|c| (c.clone(), 0)).collect(),
        ..Default::default()
    };
    for class in &manifest.classes {
        let dir = dst.join(class);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for e in &manifest.entries {
        let img = load_image(manifest.full_path(e))?;
        report.images += 1;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h < tile || w < tile {
            warn!("skipping {}: {h}×{w} is smaller than a {tile}-pixel tile", e.path);
            report.undersized += 1;
            continue;
        }
        let stem = Path::new(&e.path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let class = &manifest.classes[e.label];
        for t in assess_tiles(&img, tile, filters) {
            report.raw_tiles += 1;
            match t.verdict {
                TileVerdict::Blank => report.blank += 1,
                TileVerdict::Background => report.background += 1,
                TileVerdict::Kept => {
                    report.kept += 1;
                    report.per_class[e.label].1 += 1;
                    let out = dst.join(class).join(format!("{stem}_r{}_c{}.tnsr", t.row, t.col));
                    save_image(out, &crop(&img, t.y0, t.x0, tile, tile))?;
                }
            }
        }
    }
    Ok(report)
}
