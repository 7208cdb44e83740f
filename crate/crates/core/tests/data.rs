//! Ingestion, splitting, tiling, normalization, mixup and statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use cafpn_core::data::image::{crop, luminance, save_image};
use cafpn_core::data::manifest::val_count;
use cafpn_core::data::stats::{dataset_stats, read_category_map};
use cafpn_core::data::synth::{synthetic_textures, write_dataset};
use cafpn_core::data::tiny::{assess_tiles, border_mean, generate_tiny, TileFilters, TileVerdict};
use cafpn_core::data::{
    ingest, mixup_batch, one_hot, Dataset, DatasetManifest, IngestOptions, Normalization, Split,
};
use cafpn_core::Error;
use cafpn_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_class(root: &Path, name: &str, n: usize, h: usize, w: usize, seed: u64) {
    let dir = root.join(name);
    fs::create_dir_all(&dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let img = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        save_image(dir.join(format!("{i:03}.tnsr")), &img).unwrap();
    }
}

fn sample_tree(sizes: &[(&str, usize)]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (i, &(name, n)) in sizes.iter().enumerate() {
        write_class(dir.path(), name, n, 8, 8, i as u64);
    }
    dir
}

#[test]
fn split_is_stratified_per_class() {
    let sizes = [("ant", 10), ("bee", 7), ("cat", 23), ("dog", 3)];
    let dir = sample_tree(&sizes);
    let m = ingest(dir.path(), 5, IngestOptions::default()).unwrap();
    assert_eq!(m.classes, ["ant", "bee", "cat", "dog"]);
    for (label, &(_, n)) in sizes.iter().enumerate() {
        let val = m.entries.iter().filter(|e| e.label == label && e.split == Split::Val).count();
        let train = m.entries.iter().filter(|e| e.label == label && e.split == Split::Train).count();
        assert_eq!(val, val_count(n));
        assert_eq!(val + train, n);
        // within one image of an exact 20% share
        assert!((val as f64 - n as f64 / 5.0).abs() <= 0.5 + 1e-12);
    }
}

#[test]
fn split_is_deterministic_in_the_seed() {
    let dir = sample_tree(&[("a", 20), ("b", 20)]);
    let m1 = ingest(dir.path(), 11, IngestOptions::default()).unwrap();
    let m2 = ingest(dir.path(), 11, IngestOptions::default()).unwrap();
    let m3 = ingest(dir.path(), 12, IngestOptions::default()).unwrap();
    assert_eq!(m1, m2);
    assert_ne!(m1.entries, m3.entries);
}

#[test]
fn empty_class_error_names_the_class() {
    let dir = sample_tree(&[("full", 5)]);
    fs::create_dir_all(dir.path().join("hollow")).unwrap();
    let e = ingest(dir.path(), 0, IngestOptions::default()).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
    assert!(e.to_string().contains("hollow"), "{e}");
}

#[test]
fn tiny_class_needs_train_only_flag() {
    let dir = sample_tree(&[("big", 10), ("solo", 1)]);
    let e = ingest(dir.path(), 0, IngestOptions::default()).unwrap_err();
    assert!(e.to_string().contains("solo"), "{e}");
    let m = ingest(dir.path(), 0, IngestOptions { allow_train_only: true }).unwrap();
    let solo: Vec<_> = m.entries.iter().filter(|e| e.label == 1).collect();
    assert_eq!(solo.len(), 1);
    assert_eq!(solo[0].split, Split::Train);
}

#[test]
fn manifest_csv_round_trips() {
    let dir = sample_tree(&[("x", 6), ("y", 9)]);
    let m = ingest(dir.path(), 3, IngestOptions::default()).unwrap();
    let csv_path = dir.path().join("manifest.csv");
    m.write_csv(&csv_path).unwrap();
    let header = fs::read_to_string(&csv_path).unwrap();
    assert!(header.starts_with("path,label,split\n"));
    let back = DatasetManifest::read_csv(dir.path(), &csv_path, 3).unwrap();
    assert_eq!(back, m);
}

/// Two-tone checkerboard with `cell`-pixel squares; the top-left block of
/// `flat`×`flat` pixels is painted a uniform colour.
fn checkerboard(h: usize, w: usize, cell: usize, flat: usize) -> Tensor {
    let mut d = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = if y < flat && x < flat {
                    0.3
                } else if (y / cell + x / cell) % 2 == 0 {
                    0.9
                } else {
                    0.1
                };
                d[(c * h + y) * w + x] = v;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], d).unwrap()
}

/// Verdict recomputed from scratch by looping over tile pixels.
fn oracle_verdict(img: &Tensor, y0: usize, x0: usize, tile: usize, f: TileFilters) -> TileVerdict {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let lum = |y: usize, x: usize| {
        0.299 * img.at4_chw(0, y, x) + 0.587 * img.at4_chw(1, y, x) + 0.114 * img.at4_chw(2, y, x)
    };
    let mut frame = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                frame.push(lum(y, x));
            }
        }
    }
    let border = frame.iter().sum::<f64>() / frame.len() as f64;
    let px: Vec<f64> = (y0..y0 + tile)
        .flat_map(|y| (x0..x0 + tile).map(move |x| (y, x)))
        .map(|(y, x)| lum(y, x))
        .collect();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / px.len() as f64;
    if var < f.min_variance {
        TileVerdict::Blank
    } else if (mean - border).abs() < f.background_delta {
        TileVerdict::Background
    } else {
        TileVerdict::Kept
    }
}

trait Chw {
    fn at4_chw(&self, c: usize, y: usize, x: usize) -> f64;
}

impl Chw for Tensor {
    fn at4_chw(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape()[1], self.shape()[2]);
        self.data()[(c * h + y) * w + x]
    }
}

#[test]
fn tile_verdicts_match_pixel_loop_oracle() {
    let f = TileFilters::default();
    for (h, w, cell, flat) in [(96, 128, 4, 32), (70, 100, 3, 40), (64, 64, 32, 0), (33, 65, 5, 33)] {
        let img = checkerboard(h, w, cell, flat);
        let tiles = assess_tiles(&img, 32, f);
        assert_eq!(tiles.len(), (h / 32) * (w / 32));
        for t in &tiles {
            assert_eq!(t.verdict, oracle_verdict(&img, t.y0, t.x0, 32, f), "{h}x{w} tile {t:?}");
        }
    }
    // the uniform corner block is blank, the checkered cells are kept
    let tiles = assess_tiles(&checkerboard(96, 128, 4, 32), 32, f);
    assert_eq!(tiles[0].verdict, TileVerdict::Blank);
    assert!(tiles[1..].iter().all(|t| t.verdict == TileVerdict::Kept));
}

#[test]
fn background_filter_uses_border_mean() {
    // A textured image whose tiles all match the frame's mean luminance.
    let img = checkerboard(64, 64, 2, 0);
    let lum = luminance(&img);
    let b = border_mean(&lum, 64, 64);
    assert!((b - 0.5).abs() < 0.05);
    let tiles = assess_tiles(&img, 32, TileFilters::default());
    assert!(tiles.iter().all(|t| t.verdict == TileVerdict::Background));
    let lax = TileFilters { background_delta: 0.0, ..Default::default() };
    assert!(assess_tiles(&img, 32, lax).iter().all(|t| t.verdict == TileVerdict::Kept));
}

#[test]
fn generate_tiny_reports_raw_and_kept_counts() {
    let src = tempfile::tempdir().unwrap();
    for (class, imgs) in [("a", vec![checkerboard(96, 128, 4, 32)]), ("b", vec![checkerboard(64, 64, 4, 16), checkerboard(20, 50, 4, 0)])] {
        let dir = src.path().join(class);
        fs::create_dir_all(&dir).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            save_image(dir.join(format!("{i}.tnsr")), img).unwrap();
        }
    }
    let m = ingest(src.path(), 0, IngestOptions { allow_train_only: true }).unwrap();
    let dst = tempfile::tempdir().unwrap();
    let r = generate_tiny(&m, dst.path(), 32, TileFilters::default()).unwrap();
    assert_eq!(r.images, 3);
    assert_eq!(r.undersized, 1);
    assert_eq!(r.raw_tiles, 12 + 4);
    assert_eq!(r.kept + r.blank + r.background, r.raw_tiles);
    assert_eq!(r.blank, 1);
    assert_eq!(r.background, 0);
    assert_eq!(r.per_class, vec![("a".to_string(), 11), ("b".to_string(), 4)]);
    let tiny = ingest(dst.path(), 0, IngestOptions::default()).unwrap();
    assert_eq!(tiny.entries.len(), r.kept);
    let one = Dataset::load(&tiny, Split::Train).unwrap();
    assert!(one.images.iter().all(|t| t.shape() == [3, 32, 32]));
    // a written tile is the corresponding source window
    let src_img = checkerboard(96, 128, 4, 32);
    let tile = cafpn_core::data::image::load_image(dst.path().join("a/0_r1_c2.tnsr")).unwrap();
    assert!(tile.max_abs_diff(&crop(&src_img, 32, 64, 32, 32)) < 1e-7);
}

#[test]
fn normalization_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let imgs: Vec<Tensor> = (0..5)
        .map(|i| Tensor::uniform(&[3, 4 + i, 6], -1.0, 2.0, &mut rng))
        .collect();
    let n = Normalization::fit(&imgs).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = imgs
            .iter()
            .flat_map(|t| {
                let p = t.shape()[1] * t.shape()[2];
                t.data()[c * p..(c + 1) * p].to_vec()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((n.mean[c] - mean).abs() < 1e-12);
        assert!((n.std[c] - var.sqrt()).abs() < 1e-12);
    }
    let normed: Vec<Tensor> = imgs.iter().map(|t| n.apply(t)).collect();
    let again = Normalization::fit(&normed).unwrap();
    for c in 0..3 {
        assert!(again.mean[c].abs() < 1e-12);
        assert!((again.std[c] - 1.0).abs() < 1e-12);
    }
    assert!(Normalization::fit(&Vec::<Tensor>::new()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixup_is_a_convex_combination(lambda in 0.0f64..=1.0, seed in 0u64..1000, a in 0usize..4, b in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xa = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let xb = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let ya = one_hot(&[a, b], 4);
        let yb = one_hot(&[b, 3 - a], 4);
        let (x, y) = mixup_batch(&xa, &ya, &xb, &yb, lambda).unwrap();
        for i in 0..x.numel() {
            let lo = xa.data()[i].min(xb.data()[i]) - 1e-12;
            let hi = xa.data()[i].max(xb.data()[i]) + 1e-12;
            prop_assert!((lo..=hi).contains(&x.data()[i]));
            prop_assert!((x.data()[i] - (lambda * xa.data()[i] + (1.0 - lambda) * xb.data()[i])).abs() < 1e-15);
        }
        for r in 0..2 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn stats_count_every_image_once() {
    let dir = sample_tree(&[("owl", 10), ("oak", 6), ("elm", 4)]);
    let m = ingest(dir.path(), 1, IngestOptions::default()).unwrap();
    let r = dataset_stats(&m, None);
    assert_eq!(r.total_images(), 20);
    assert!(r.categories.is_none());
    assert_eq!(r.largest_class().unwrap().class, "owl");
    for c in &r.classes {
        assert_eq!(c.train + c.val, c.total);
    }

    let map_path = dir.path().join("cats.csv");
    fs::write(&map_path, "class,category\nowl,animal\noak,plant\n").unwrap();
    let map = read_category_map(&map_path).unwrap();
    let r = dataset_stats(&m, Some(&map));
    let cats = r.categories.unwrap();
    let get = |n: &str| cats.iter().find(|c| c.category == n).unwrap().clone();
    assert_eq!((get("animal").classes, get("animal").images), (1, 10));
    assert_eq!((get("plant").classes, get("plant").images), (1, 6));
    assert_eq!(get("uncategorized").images, 4);

    fs::write(&map_path, "class,category\n").unwrap();
    let empty = read_category_map(&map_path).unwrap();
    assert!(dataset_stats(&m, Some(&empty)).categories.is_none());
    assert!(dataset_stats(&m, Some(&BTreeMap::new())).categories.is_none());
}

#[test]
fn synthetic_textures_are_seeded_and_ingestible() {
    let a = synthetic_textures(5, 4, 16, 9);
    let b = synthetic_textures(5, 4, 16, 9);
    assert_eq!(a.images, b.images);
    assert_eq!(a.len(), 20);
    assert!((a.class_fraction(2) - 0.2).abs() < 1e-12);
    assert!(a.images.iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &a).unwrap();
    let m = ingest(dir.path(), 0, IngestOptions::default()).unwrap();
    assert_eq!(m.entries.len(), 20);
    assert_eq!(m.num_classes(), 5);
}
