//! In-memory labelled image collections.

use cafpn_tensor::Tensor;

use crate::data::image::load_image;
use crate::data::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Images are 3×H×W in [0, 1]; sizes may differ until preprocessing.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_names,
        })
    }

    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for e in manifest.split(split) {
            images.push(load_image(manifest.full_path(e))?);
            labels.push(e.label);
        }
        Self::new(images, labels, manifest.classes.clone())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Share of the examples labelled `k`.
    pub fn class_fraction(&self, k: usize) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l == k).count() as f64 / self.len() as f64
    }
}
