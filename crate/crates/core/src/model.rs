//! Backbone + pyramid + classification head.

use std::path::Path;

use cafpn_tensor::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{Error, Result};
use crate::nn::{Linear, Session};
use crate::params::ParamStore;
use crate::pyramid::{Fusion, Pyramid, PyramidConfig, PyramidOutput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// GAP per level, concatenated, then one fully connected layer.
    #[default]
    ConcatGap,
    /// GAP per level, summed, then one fully connected layer.
    SumGap,
}

pub const MODEL_NAMES: [&str; 4] = ["fpn", "fpn-ca", "fpn-srr", "fpn-srr-ca"];

pub fn fusion_for_model(name: &str) -> Result<Fusion> {
    match name {
        "fpn" => Ok(Fusion::Plain),
        "fpn-ca" => Ok(Fusion::Ca),
        "fpn-srr" => Ok(Fusion::Srr),
        "fpn-srr-ca" => Ok(Fusion::SrrCa),
        other => Err(Error::Config(format!(
            "unknown model `{other}`; expected one of {}",
            MODEL_NAMES.join(", ")
        ))),
    }
}

pub fn model_name(fusion: Fusion) -> &'static str {
    match fusion {
        Fusion::Plain => "fpn",
        Fusion::Ca => "fpn-ca",
        Fusion::Srr => "fpn-srr",
        Fusion::SrrCa => "fpn-srr-ca",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    pub pyramid: PyramidConfig,
    pub num_classes: usize,
    #[serde(default)]
    pub head: Head,
}

impl ModelSpec {
    /// A standard-depth model with the family's default pyramid settings.
    pub fn standard(depth: usize, fusion: Fusion, num_classes: usize) -> Result<Self> {
        let backbone = BackboneSpec::preact(depth)?;
        let pyramid = PyramidConfig::for_backbone(&backbone, fusion);
        Ok(Self {
            backbone,
            pyramid,
            num_classes,
            head: Head::ConcatGap,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        self.backbone.validate()?;
        self.pyramid.validate()
    }

    fn head_inputs(&self) -> usize {
        match self.head {
            Head::ConcatGap => self.backbone.levels() * self.pyramid.width,
            Head::SumGap => self.pyramid.width,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub fc: Linear,
}

/// Forward products a caller may want beyond the logits.
#[derive(Clone, Debug)]
pub struct ForwardParts {
    pub levels: Vec<Var>,
    pub pyramid: PyramidOutput,
    pub logits: Var,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(spec.backbone.clone(), &mut store, &mut rng)?;
        let pyramid = Pyramid::new(
            spec.pyramid.clone(),
            &spec.backbone.stage_channels,
            &mut store,
            &mut rng,
        )?;
        let fc = Linear::new(&mut store, &mut rng, "head/fc", spec.head_inputs(), spec.num_classes);
        Ok(Self {
            spec,
            store,
            backbone,
            pyramid,
            fc,
        })
    }

    pub fn forward_parts(&self, s: &mut Session, x: Var) -> Result<ForwardParts> {
        let levels = self.backbone.extract_levels(s, x)?;
        let pyramid = self.pyramid.forward(s, &levels)?;
        let pooled = pyramid
            .outputs
            .iter()
            .map(|&p| s.g.global_avg_pool(p))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let features = match self.spec.head {
            Head::ConcatGap => s.g.concat(&pooled)?,
            Head::SumGap => {
                let mut acc = pooled[0];
                for &p in &pooled[1..] {
                    acc = s.g.add(acc, p)?;
                }
                acc
            }
        };
        let logits = self.fc.forward(s, features)?;
        Ok(ForwardParts {
            levels,
            pyramid,
            logits,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_parts(s, x)?.logits)
    }

    /// Eval-mode logits without gradient tracking.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::eval(&self.store);
        let xv = s.input(x.clone());
        let y = self.forward(&mut s, xv)?;
        Ok(s.g.value(y).clone())
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path)
    }

    /// Rebuilds the architecture from `spec` and fills it from a checkpoint.
    pub fn load(spec: ModelSpec, path: impl AsRef<Path>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        model.store.load(path)?;
        Ok(model)
    }
}

/// Learnable scalars in a store (running statistics excluded).
pub fn count_parameters(store: &ParamStore) -> usize {
    store.count_learnable()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names_round_trip() {
        for name in MODEL_NAMES {
            assert_eq!(model_name(fusion_for_model(name).unwrap()), name);
        }
        assert!(fusion_for_model("fpn-xx").is_err());
    }

    #[test]
    fn empty_store_has_no_parameters() {
        assert_eq!(count_parameters(&ParamStore::new()), 0);
    }

    #[test]
    fn rejects_single_class() {
        assert!(ModelSpec::standard(20, Fusion::Plain, 1).unwrap().validate().is_err());
    }
}
