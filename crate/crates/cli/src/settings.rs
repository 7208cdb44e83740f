//! Training-setting overrides and the `config.json` provenance record.
//!
//! Settings resolve as preset defaults, then the `--config` file, then
//! explicit flags, each layer replacing only the fields it sets.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use cafpn_core::pyramid::Upsample;
use cafpn_core::trainer::TrainConfig;
use cafpn_core::ModelSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub base_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub momentum: Option<f64>,
    pub milestones: Option<Vec<(usize, f64)>>,
    pub mixup_alpha: Option<f64>,
    pub seed: Option<u64>,
    pub upsample: Option<Upsample>,
    pub width: Option<usize>,
    pub reduction: Option<usize>,
}

impl Overrides {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config `{}`", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config `{}`", path.display()))
    }

    /// Fields set in `top` win over those set here.
    pub fn layered(mut self, top: &Overrides) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if top.$f.is_some() { self.$f = top.$f.clone(); } )* };
        }
        take!(epochs, batch_size, base_lr, weight_decay, momentum, milestones, mixup_alpha, seed, upsample, width, reduction);
        self
    }

    pub fn apply_train(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
            if let Some(m) = cfg.mixup.as_mut() {
                *m = cafpn_core::data::MixupConfig { alpha: m.alpha, ..cafpn_core::data::MixupConfig::for_epochs(v) };
            }
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = &self.milestones {
            cfg.milestones = v.clone();
        }
        if let (Some(a), Some(m)) = (self.mixup_alpha, cfg.mixup.as_mut()) {
            m.alpha = a;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
    }

    pub fn apply_model(&self, spec: &mut ModelSpec) {
        if let Some(v) = self.upsample {
            spec.pyramid.upsample = v;
        }
        if let Some(v) = self.width {
            spec.pyramid.width = v;
        }
        if let Some(v) = self.reduction {
            spec.pyramid.reduction = v;
        }
    }
}

/// Everything needed to reproduce a run, written to `<out>/config.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub model: String,
    pub depth: usize,
    pub preset: String,
    pub data: PathBuf,
    pub config_file: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Explicit flags as given.
    pub flags: Overrides,
    pub train: TrainConfig,
    pub spec: ModelSpec,
}
