//! Named training recipes and their step learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::backbone::Family;
use crate::data::{AugMode, CropStyle, MixupConfig};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 7] = [
    "cnh_aug",
    "cnh_mixup",
    "cnh_noaug",
    "tcnh_aug",
    "tcnh_mixup",
    "tcnh_noaug",
    "smoke",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub name: String,
    pub family: Family,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    /// `(epoch, divisor)`: from `epoch` on the rate is divided by `divisor`.
    pub milestones: Vec<(usize, f64)>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub regime: AugMode,
    pub crop: CropStyle,
    pub mixup: Option<MixupConfig>,
    pub seed: u64,
}

#[allow(clippy::too_many_arguments)]
fn recipe(
    name: &str,
    family: Family,
    batch_size: usize,
    epochs: usize,
    milestones: &[usize],
    divisor: f64,
    weight_decay: f64,
    regime: AugMode,
) -> TrainConfig {
    TrainConfig {
        name: name.to_string(),
        family,
        batch_size,
        epochs,
        base_lr: 0.1,
        milestones: milestones.iter().map(|&e| (e, divisor)).collect(),
        weight_decay,
        momentum: 0.9,
        regime,
        crop: match family {
            Family::Imagenet => CropStyle::IMAGENET,
            Family::Cifar => CropStyle::CIFAR,
        },
        mixup: (regime == AugMode::Mixup).then(|| MixupConfig::for_epochs(epochs)),
        seed: 0,
    }
}

/// Full-size images use the 224 pipeline, 32×32 tiles the padded-crop one.
pub fn preset(name: &str) -> Result<TrainConfig> {
    use AugMode::*;
    use Family::*;
    let cfg = match name {
        "cnh_aug" => recipe(name, Imagenet, 64, 300, &[120, 200, 260], 5.0, 5e-4, Standard),
        "cnh_mixup" => recipe(name, Imagenet, 64, 300, &[120, 200, 260], 5.0, 1e-4, Mixup),
        "cnh_noaug" => recipe(name, Imagenet, 64, 120, &[30, 60, 90], 5.0, 5e-4, None),
        "tcnh_aug" => recipe(name, Cifar, 128, 300, &[100, 150, 200], 10.0, 1e-4, Standard),
        "tcnh_mixup" => recipe(name, Cifar, 128, 300, &[100, 150, 200], 10.0, 1e-4, Mixup),
        "tcnh_noaug" => recipe(name, Cifar, 128, 120, &[30, 60, 90], 5.0, 1e-4, None),
        "smoke" => {
            let mut c = recipe(name, Cifar, 8, 3, &[], 5.0, 5e-4, Standard);
            c.base_lr = 0.05;
            c
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(cfg)
}

impl TrainConfig {
    /// Negated comparisons are deliberate: they reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "lr {} / momentum {} / weight decay {} out of range",
                self.base_lr, self.momentum, self.weight_decay
            )));
        }
        let mut prev = None;
        for &(e, d) in &self.milestones {
            if prev.is_some_and(|p| e <= p) || e >= self.epochs || !(d > 1.0) {
                return Err(Error::Config(format!(
                    "milestones {:?} must be strictly increasing, below {} epochs, with divisors > 1",
                    self.milestones, self.epochs
                )));
            }
            prev = Some(e);
        }
        if let Some(m) = &self.mixup {
            if !(m.alpha > 0.0) {
                return Err(Error::Config(format!("mixup alpha {} must be positive", m.alpha)));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let div: f64 = self
            .milestones
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .map(|&(_, d)| d)
            .product();
        self.base_lr / div
    }

    pub fn lr_curve(&self) -> Vec<f64> {
        (0..self.epochs).map(|e| self.lr_at(e)).collect()
    }

    /// Whether `depth` belongs to the backbone family this recipe's input
    /// pipeline is built for.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        let family = crate::backbone::BackboneSpec::preact(depth)?.family;
        if family != self.family {
            return Err(Error::Config(format!(
                "depth {depth} is a {family:?}-style backbone but preset `{}` feeds {} inputs",
                self.name,
                match self.family {
                    Family::Imagenet => "224×224",
                    Family::Cifar => "32×32",
                }
            )));
        }
        Ok(())
    }
}
