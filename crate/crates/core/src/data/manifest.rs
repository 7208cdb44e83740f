//! Directory ingestion and the stratified 4:1 train/validation split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const IMAGE_EXT: &str = "tnsr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestOptions {
    /// Keep classes too small to contribute a validation image, training
    /// only, instead of failing.
    pub allow_train_only: bool,
}

/// Validation share of a class with `n` images: n/5 rounded to nearest.
pub fn val_count(n: usize) -> usize {
    (n + 2) / 5
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn class_seed(seed: u64, label: usize) -> u64 {
    seed ^ (label as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Walks `root/<class>/<image>.tnsr`. Classes are sorted by name and
/// labelled densely; each class is shuffled by its own seeded stream and
/// its first `val_count(n)` images go to validation.
pub fn ingest(root: impl AsRef<Path>, seed: u64, opts: IngestOptions) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_dir(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", root.display())));
    }
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("{}: class name is not UTF-8", dir.display())))?
            .to_string();
        let mut files: Vec<String> = sorted_dir(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == IMAGE_EXT))
            .map(|p| format!("{name}/{}", p.file_name().unwrap().to_string_lossy()))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class `{name}` has no .{IMAGE_EXT} images")));
        }
        let n_val = val_count(files.len());
        if n_val == 0 && !opts.allow_train_only {
            return Err(Error::Data(format!(
                "class `{name}` has {} image(s), too few for a 4:1 split",
                files.len()
            )));
        }
        files.shuffle(&mut ChaCha8Rng::seed_from_u64(class_seed(seed, label)));
        for (i, path) in files.into_iter().enumerate() {
            let split = if i < n_val { Split::Val } else { Split::Train };
            entries.push(ManifestEntry { path, label, split });
        }
        classes.push(name);
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        entries,
        seed,
    })
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn full_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(io_err("manifest"))?;
        Ok(())
    }

    /// Reads a manifest CSV; class names are recovered from the path prefixes.
    pub fn read_csv(root: impl AsRef<Path>, path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let entries: Vec<ManifestEntry> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let k = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let mut classes = vec![String::new(); k];
        for e in &entries {
            let name = e.path.split('/').next().unwrap_or_default();
            classes[e.label] = name.to_string();
        }
        if let Some(i) = classes.iter().position(String::is_empty) {
            return Err(Error::Data(format!("manifest has no entries for label {i}")));
        }
        Ok(Self {
            root: root.as_ref().to_path_buf(),
            classes,
            entries,
            seed,
        })
    }
}
