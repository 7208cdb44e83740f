//! Procedural texture classes for smoke tests and overfitting runs.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use cafpn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::dataset::Dataset;
use crate::data::image::save_image;
use crate::error::{io_err, Result};

const PATTERNS: usize = 5;

/// Luminance pattern of class `k` at pixel (y, x), in [0, 1].
fn pattern(k: usize, y: f64, x: f64, period: f64, phase: f64) -> f64 {
    let w = 2.0 * PI / period;
    match k % PATTERNS {
        0 => 0.5 + 0.5 * (w * y + phase).sin(),
        1 => 0.5 + 0.5 * (w * x + phase).sin(),
        2 => {
            let cell = period / 2.0;
            let a = ((y + phase) / cell).floor() as i64 + ((x + phase) / cell).floor() as i64;
            if a.rem_euclid(2) == 0 { 0.85 } else { 0.15 }
        }
        3 => 0.5 + 0.5 * (w * (x + y) / 2f64.sqrt() + phase).sin(),
        _ => {
            let r = (y * y + x * x).sqrt();
            0.5 + 0.5 * (w * r + phase).cos()
        }
    }
}

/// `per_class` images of `size`×`size` for each of `classes` texture
/// classes. Classes beyond the five base patterns reuse them under a
/// different tint.
pub fn synthetic_textures(classes: usize, per_class: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let tint_shift = (k / PATTERNS) as f64 * 0.37;
        let tint = [0.0, 1.0, 2.0].map(|c: f64| 0.6 + 0.4 * (2.0 * PI * (c / 3.0 + tint_shift)).cos());
        for _ in 0..per_class {
            let period = rng.random_range(5.0..9.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (cy, cx) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
            let mut data = vec![0.0; 3 * size * size];
            for y in 0..size {
                for x in 0..size {
                    let (yy, xx) = if k % PATTERNS == 4 {
                        (y as f64 - cy, x as f64 - cx)
                    } else {
                        (y as f64, x as f64)
                    };
                    let v = pattern(k, yy, xx, period, phase);
                    for (c, t) in tint.iter().enumerate() {
                        let noise = rng.random_range(-0.05..0.05);
                        data[(c * size + y) * size + x] = (v * t + noise).clamp(0.0, 1.0);
                    }
                }
            }
            images.push(Tensor::from_vec(&[3, size, size], data).expect("image extents"));
            labels.push(k);
        }
    }
    let names = (0..classes).map(|k| format!("texture{k:02}")).collect();
    Dataset::new(images, labels, names).expect("labels are in range")
}

/// Writes `root/<class>/img{i:04}.tnsr` so the set can be ingested.
pub fn write_dataset(root: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let root = root.as_ref();
    let mut counters = vec![0usize; ds.num_classes()];
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for (img, &l) in ds.images.iter().zip(&ds.labels) {
        let p = root
            .join(&ds.class_names[l])
            .join(format!("img{:04}.tnsr", counters[l]));
        counters[l] += 1;
        save_image(p, img)?;
    }
    Ok(())
}
