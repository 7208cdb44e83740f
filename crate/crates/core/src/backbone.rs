//! Pre-activation residual networks exposing one feature map per stage.

use cafpn_tensor::Var;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvShape, Session};
use crate::params::ParamStore;

pub const SUPPORTED_DEPTHS: [usize; 4] = [18, 34, 20, 56];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// 7×7/2 stem plus 3×3/2 max pool, four stages.
    Imagenet,
    /// 3×3 stem at full resolution, three stages.
    Cifar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    /// `None` for custom layouts.
    pub depth: Option<usize>,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks: Vec<usize>,
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn preact(depth: usize) -> Result<Self> {
        let (family, blocks, stage_channels, stem, input) = match depth {
            18 => (Family::Imagenet, vec![2, 2, 2, 2], vec![64, 128, 256, 512], 64, 224),
            34 => (Family::Imagenet, vec![3, 4, 6, 3], vec![64, 128, 256, 512], 64, 224),
            20 => (Family::Cifar, vec![3, 3, 3], vec![16, 32, 64], 16, 32),
            56 => (Family::Cifar, vec![9, 9, 9], vec![16, 32, 64], 16, 32),
            other => {
                return Err(Error::Config(format!(
                    "unsupported depth {other}; supported depths are 18, 34 (ImageNet-style) and 20, 56 (CIFAR-style)"
                )))
            }
        };
        Ok(Self {
            family,
            depth: Some(depth),
            stem_channels: stem,
            stage_channels,
            blocks,
            input_size: input,
        })
    }

    pub fn custom(
        family: Family,
        stem_channels: usize,
        stage_channels: Vec<usize>,
        blocks: Vec<usize>,
        input_size: usize,
    ) -> Result<Self> {
        let spec = Self {
            family,
            depth: None,
            stem_channels,
            stage_channels,
            blocks,
            input_size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn levels(&self) -> usize {
        self.stage_channels.len()
    }

    /// Total downsampling before the first stage.
    pub fn stem_stride(&self) -> usize {
        match self.family {
            Family::Imagenet => 4,
            Family::Cifar => 1,
        }
    }

    /// Spatial extent of each level, finest first.
    pub fn level_extents(&self) -> Vec<usize> {
        let mut e = self.input_size / self.stem_stride();
        (0..self.levels())
            .map(|i| {
                if i > 0 {
                    e = e.div_ceil(2);
                }
                e
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.blocks.len() {
            return Err(Error::Config(
                "stage_channels and blocks must be non-empty and equally long".into(),
            ));
        }
        if self.blocks.contains(&0) || self.stage_channels.contains(&0) || self.stem_channels == 0 {
            return Err(Error::Config("every stage needs at least one block and channel".into()));
        }
        let unit = self.stem_stride() << (self.levels() - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {unit}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// Residual unit with BN → ReLU → conv ordering. A projection shortcut
/// acts on the pre-activated input whenever width or stride changes.
#[derive(Clone, Debug)]
struct PreActBlock {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl PreActBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let bn1 = BatchNorm::new(store, &format!("{name}/bn1"), cin);
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}/conv1"),
            ConvShape::new(cin, cout, 3).stride(stride).pad(1),
        );
        let bn2 = BatchNorm::new(store, &format!("{name}/bn2"), cout);
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}/conv2"),
            ConvShape::new(cout, cout, 3).pad(1),
        );
        let shortcut = (stride != 1 || cin != cout).then(|| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}/shortcut"),
                ConvShape::new(cin, cout, 1).stride(stride),
            )
        });
        Self {
            bn1,
            conv1,
            bn2,
            conv2,
            shortcut,
        }
    }

    fn preact(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.bn1.forward(s, x)?;
        Ok(s.g.relu(y))
    }

    /// `x` is the raw block input and `a` its pre-activation.
    fn forward(&self, s: &mut Session, x: Var, a: Var) -> Result<Var> {
        let h = self.conv1.forward(s, a)?;
        let h = self.bn2.forward(s, h)?;
        let h = s.g.relu(h);
        let h = self.conv2.forward(s, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(s, a)?,
            None => x,
        };
        Ok(s.g.add(h, skip)?)
    }
}

#[derive(Clone, Debug)]
enum Stem {
    Imagenet { conv: Conv2d, bn: BatchNorm },
    Cifar { conv: Conv2d },
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    stem: Stem,
    stages: Vec<Vec<PreActBlock>>,
    final_bn: BatchNorm,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        spec: BackboneSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let stem = match spec.family {
            Family::Imagenet => Stem::Imagenet {
                conv: Conv2d::new(
                    store,
                    rng,
                    "backbone/stem/conv",
                    ConvShape::new(3, spec.stem_channels, 7).stride(2).pad(3),
                ),
                bn: BatchNorm::new(store, "backbone/stem/bn", spec.stem_channels),
            },
            Family::Cifar => Stem::Cifar {
                conv: Conv2d::new(
                    store,
                    rng,
                    "backbone/stem/conv",
                    ConvShape::new(3, spec.stem_channels, 3).pad(1),
                ),
            },
        };
        let mut cin = spec.stem_channels;
        let mut stages = Vec::new();
        for (si, (&cout, &n)) in spec.stage_channels.iter().zip(&spec.blocks).enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..n {
                let stride = if bi == 0 && si > 0 { 2 } else { 1 };
                let name = format!("backbone/stage{}/block{}", si + 1, bi + 1);
                blocks.push(PreActBlock::new(store, rng, &name, cin, cout, stride));
                cin = cout;
            }
            stages.push(blocks);
        }
        let final_bn = BatchNorm::new(store, "backbone/final_bn", cin);
        Ok(Self {
            spec,
            stem,
            stages,
            final_bn,
        })
    }

    /// Runs the bottom-up pathway and returns one map per stage, finest
    /// first. Each map is its stage's output after the pre-activation that
    /// the next stage (or the closing BN-ReLU) applies to it.
    pub fn extract_levels(&self, s: &mut Session, x: Var) -> Result<Vec<Var>> {
        let shape = s.g.shape(x).to_vec();
        let size = self.spec.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != size || shape[3] != size {
            return Err(Error::Shape(format!(
                "backbone expects N×3×{size}×{size} input, got {shape:?}"
            )));
        }
        let mut h = match &self.stem {
            Stem::Imagenet { conv, bn } => {
                let y = conv.forward(s, x)?;
                let y = bn.forward(s, y)?;
                let y = s.g.relu(y);
                s.g.max_pool2d(y, 3, 2, 1)?
            }
            Stem::Cifar { conv } => conv.forward(s, x)?,
        };
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut pending: Option<Var> = None;
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                let a = match pending.take() {
                    Some(a) if bi == 0 => a,
                    _ => block.preact(s, h)?,
                };
                h = block.forward(s, h, a)?;
            }
            let level = match self.stages.get(si + 1) {
                Some(next) => next[0].preact(s, h)?,
                None => {
                    let y = self.final_bn.forward(s, h)?;
                    s.g.relu(y)
                }
            };
            pending = Some(level);
            levels.push(level);
        }
        Ok(levels)
    }
}
