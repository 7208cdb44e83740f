//! Crop/flip augmentation and per-channel normalization.

use cafpn_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::{center_crop, crop, hflip, resize_shorter, zero_pad};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    None,
    Standard,
    Mixup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropStyle {
    /// Shorter side to `resize`, then a `crop` window (random when training,
    /// centered otherwise).
    ResizeCrop { resize: usize, crop: usize },
    /// Zero-pad by `pad`, then a random `crop` window when training; the
    /// unpadded center otherwise.
    PadCrop { pad: usize, crop: usize },
}

impl CropStyle {
    pub const IMAGENET: CropStyle = CropStyle::ResizeCrop {
        resize: 256,
        crop: 224,
    };
    pub const CIFAR: CropStyle = CropStyle::PadCrop { pad: 4, crop: 32 };

    pub fn crop_size(&self) -> usize {
        match *self {
            CropStyle::ResizeCrop { crop, .. } | CropStyle::PadCrop { crop, .. } => crop,
        }
    }
}

/// Crop and flip. With `train` false the path is deterministic.
pub fn augment_standard<R: Rng + ?Sized>(
    img: &Tensor,
    style: CropStyle,
    train: bool,
    rng: &mut R,
) -> Tensor {
    let out = match style {
        CropStyle::ResizeCrop { resize, crop: size } => {
            let r = resize_shorter(img, resize);
            let (h, w) = (r.shape()[1], r.shape()[2]);
            if train {
                let y0 = rng.random_range(0..=h - size);
                let x0 = rng.random_range(0..=w - size);
                crop(&r, y0, x0, size, size)
            } else {
                center_crop(&r, size)
            }
        }
        CropStyle::PadCrop { pad, crop: size } => {
            let fitted = if img.shape()[1] == size && img.shape()[2] == size {
                img.clone()
            } else {
                center_crop(&resize_shorter(img, size), size)
            };
            if train {
                let p = zero_pad(&fitted, pad);
                let y0 = rng.random_range(0..=2 * pad);
                let x0 = rng.random_range(0..=2 * pad);
                crop(&p, y0, x0, size, size)
            } else {
                fitted
            }
        }
    };
    if train && rng.random_bool(0.5) {
        hflip(&out)
    } else {
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Two-pass per-channel mean and population standard deviation over
    /// every pixel of every image.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor> + Clone) -> Result<Self> {
        let mut sum = [0.0; 3];
        let mut count = 0usize;
        for img in images.clone() {
            let p = img.shape()[1] * img.shape()[2];
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img.data()[c * p..(c + 1) * p].iter().sum::<f64>();
            }
            count += p;
        }
        if count == 0 {
            return Err(Error::Data("cannot fit normalization on no images".into()));
        }
        let mean = sum.map(|s| s / count as f64);
        let mut sq = [0.0; 3];
        for img in images {
            let p = img.shape()[1] * img.shape()[2];
            for (c, q) in sq.iter_mut().enumerate() {
                *q += img.data()[c * p..(c + 1) * p]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        let std = sq.map(|q| (q / count as f64).sqrt().max(1e-12));
        Ok(Self { mean, std })
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        let p = img.shape()[1] * img.shape()[2];
        let mut out = img.clone();
        for (c, chunk) in out.data_mut().chunks_mut(p).enumerate() {
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Everything that turns a stored image into a network input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub style: CropStyle,
    pub norm: Normalization,
    /// Random crop/flip while training.
    pub augment: bool,
}

impl Preprocessor {
    pub fn apply<R: Rng + ?Sized>(&self, img: &Tensor, train: bool, rng: &mut R) -> Tensor {
        let geo = augment_standard(img, self.style, train && self.augment, rng);
        self.norm.apply(&geo)
    }
}
