//! The top-down pathway over lateral projections, with its four fusion variants.

use cafpn_tensor::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Family};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, ConvShape, Deconv2x, Session};
use crate::params::{he_normal, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Bilinear,
    Nearest,
    Deconv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Plain,
    Ca,
    Srr,
    SrrCa,
}

impl Fusion {
    pub fn uses_ca(self) -> bool {
        matches!(self, Fusion::Ca | Fusion::SrrCa)
    }

    pub fn uses_srr(self) -> bool {
        matches!(self, Fusion::Srr | Fusion::SrrCa)
    }
}

/// Initial values of the attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionInit {
    #[default]
    Random,
    /// CA matrices and SRR conv kernels start at zero, so every gate reads 0.5.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Lateral width C_d.
    pub width: usize,
    pub upsample: Upsample,
    pub fusion: Fusion,
    /// Excitation bottleneck divisor t.
    pub reduction: usize,
    /// 3×3 conv on each merged map before the head.
    pub smoothing: bool,
    /// Extra sigmoid on both combination branches of srr_ca.
    pub final_sigmoid: bool,
    #[serde(default)]
    pub attention_init: AttentionInit,
}

impl PyramidConfig {
    pub fn new(width: usize, fusion: Fusion) -> Self {
        Self {
            width,
            upsample: Upsample::Bilinear,
            fusion,
            reduction: 16,
            smoothing: false,
            final_sigmoid: false,
            attention_init: AttentionInit::Random,
        }
    }

    /// Defaults per backbone family: C_d = 256 with smoothing convs for
    /// ImageNet-style backbones, C_d = 64 without for CIFAR-style ones.
    pub fn for_backbone(spec: &BackboneSpec, fusion: Fusion) -> Self {
        match spec.family {
            Family::Imagenet => Self {
                smoothing: true,
                ..Self::new(256, fusion)
            },
            Family::Cifar => Self::new(64, fusion),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.reduction == 0 {
            return Err(Error::Config("width and reduction must be positive".into()));
        }
        if self.fusion.uses_ca() && !(2 * self.width).is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "2·C_d = {} is not divisible by t = {}",
                2 * self.width,
                self.reduction
            )));
        }
        Ok(())
    }
}

/// Gates produced by competitive attention, each N×C_d in (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct CaActivations {
    pub s_spa: Var,
    pub s_sem: Var,
}

/// Pixel gates produced by spatial recalibration, each N×1×H×W in (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct SrrMaps {
    pub m_spa: Var,
    pub m_sem: Var,
}

/// Squeeze-excitation over both flows' global descriptors.
#[derive(Clone, Debug)]
pub struct CompetitiveAttention {
    /// (2C/t)×2C
    pub w1: ParamId,
    /// 2C×(2C/t)
    pub w2: ParamId,
    pub width: usize,
}

impl CompetitiveAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        reduction: usize,
        init: AttentionInit,
    ) -> Self {
        let c2 = 2 * width;
        let hidden = c2 / reduction;
        let (w1, w2) = match init {
            AttentionInit::Random => (
                he_normal(&[hidden, c2], c2, rng),
                he_normal(&[c2, hidden], hidden, rng),
            ),
            AttentionInit::Zero => (Tensor::zeros(&[hidden, c2]), Tensor::zeros(&[c2, hidden])),
        };
        Self {
            w1: store.learnable(format!("{name}/w1"), w1),
            w2: store.learnable(format!("{name}/w2"), w2),
            width,
        }
    }

    pub fn activations(&self, s: &mut Session, xl: Var, xu: Var) -> Result<CaActivations> {
        let n = s.g.shape(xl)[0];
        if s.hooks.force_attention_ones {
            let ones = Tensor::ones(&[n, self.width]);
            return Ok(CaActivations {
                s_spa: s.input(ones.clone()),
                s_sem: s.input(ones),
            });
        }
        let u_spa = s.g.global_avg_pool(xl)?;
        let u_sem = s.g.global_avg_pool(xu)?;
        let u = s.g.concat(&[u_spa, u_sem])?;
        let w1 = s.param(self.w1);
        let w2 = s.param(self.w2);
        let z = s.g.linear(u, w1, None)?;
        let z = s.g.relu(z);
        let e = s.g.linear(z, w2, None)?;
        let gate = s.g.sigmoid(e);
        Ok(CaActivations {
            s_spa: s.g.narrow(gate, 0, self.width)?,
            s_sem: s.g.narrow(gate, self.width, self.width)?,
        })
    }
}

/// Pixel-level gates from the cross-channel means of both flows.
#[derive(Clone, Debug)]
pub struct SpatialRecalibration {
    pub conv3: Conv2d,
    pub bn: BatchNorm,
    pub conv1: Conv2d,
}

impl SpatialRecalibration {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        init: AttentionInit,
    ) -> Self {
        let conv3 = Conv2d::new(
            store,
            rng,
            &format!("{name}/conv3"),
            ConvShape::new(2, 2, 3).stride(2).pad(1),
        );
        let bn = BatchNorm::new(store, &format!("{name}/bn"), 2);
        let conv1 = Conv2d::new(store, rng, &format!("{name}/conv1"), ConvShape::new(2, 2, 1).bias());
        if init == AttentionInit::Zero {
            store.get_mut(conv3.w).data_mut().fill(0.0);
            store.get_mut(conv1.w).data_mut().fill(0.0);
        }
        Self { conv3, bn, conv1 }
    }

    pub fn maps(&self, s: &mut Session, xl: Var, xu: Var) -> Result<SrrMaps> {
        let shape = s.g.shape(xl).to_vec();
        let (h, w) = (shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "spatial recalibration needs even extents, got {h}×{w}"
            )));
        }
        if s.hooks.force_attention_ones {
            let ones = Tensor::ones(&[shape[0], 1, h, w]);
            return Ok(SrrMaps {
                m_spa: s.input(ones.clone()),
                m_sem: s.input(ones),
            });
        }
        let a = s.g.channel_mean(xl)?;
        let b = s.g.channel_mean(xu)?;
        let y = s.g.concat(&[a, b])?;
        let y = self.conv3.forward(s, y)?;
        let y = self.bn.forward(s, y)?;
        let y = s.g.bilinear_up2(y)?;
        let y = self.conv1.forward(s, y)?;
        let y = s.g.sigmoid(y);
        Ok(SrrMaps {
            m_spa: s.g.narrow(y, 0, 1)?,
            m_sem: s.g.narrow(y, 1, 1)?,
        })
    }
}

/// The two 1×1 C_d→C_d convolutions (each followed by BN) of srr_ca.
#[derive(Clone, Debug)]
pub struct Combination {
    pub conv_l: Conv2d,
    pub bn_l: BatchNorm,
    pub conv_u: Conv2d,
    pub bn_u: BatchNorm,
}

impl Combination {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        Self {
            conv_l: Conv2d::new(store, rng, &format!("{name}/combo_l"), ConvShape::new(c, c, 1)),
            bn_l: BatchNorm::new(store, &format!("{name}/combo_l_bn"), c),
            conv_u: Conv2d::new(store, rng, &format!("{name}/combo_u"), ConvShape::new(c, c, 1)),
            bn_u: BatchNorm::new(store, &format!("{name}/combo_u_bn"), c),
        }
    }

    /// Identity convolutions and pass-through BN (exact in eval mode).
    pub fn set_passthrough(&self, store: &mut ParamStore) {
        for conv in [&self.conv_l, &self.conv_u] {
            let w = store.get_mut(conv.w);
            let c = w.shape()[0];
            w.data_mut().fill(0.0);
            for i in 0..c {
                w.data_mut()[i * c + i] = 1.0;
            }
        }
        self.bn_l.set_passthrough(store);
        self.bn_u.set_passthrough(store);
    }
}

pub fn fuse_plain(s: &mut Session, xl: Var, xu: Var) -> Result<Var> {
    Ok(s.g.add(xl, xu)?)
}

pub fn competitive_attention(
    s: &mut Session,
    ca: &CompetitiveAttention,
    xl: Var,
    xu: Var,
) -> Result<(CaActivations, Var)> {
    let act = ca.activations(s, xl, xu)?;
    let l = s.g.mul_channel(xl, act.s_spa)?;
    let u = s.g.mul_channel(xu, act.s_sem)?;
    Ok((act, s.g.add(l, u)?))
}

pub fn fuse_srr(
    s: &mut Session,
    srr: &SpatialRecalibration,
    xl: Var,
    xu: Var,
) -> Result<(SrrMaps, Var)> {
    let maps = srr.maps(s, xl, xu)?;
    let l = s.g.mul_pixel(xl, maps.m_spa)?;
    let u = s.g.mul_pixel(xu, maps.m_sem)?;
    Ok((maps, s.g.add(l, u)?))
}

pub fn fuse_srr_ca(
    s: &mut Session,
    ca: &CompetitiveAttention,
    srr: &SpatialRecalibration,
    combo: &Combination,
    final_sigmoid: bool,
    xl: Var,
    xu: Var,
) -> Result<(CaActivations, SrrMaps, Var)> {
    let act = ca.activations(s, xl, xu)?;
    let maps = srr.maps(s, xl, xu)?;
    let branch = |s: &mut Session, x, gate, map, conv: &Conv2d, bn: &BatchNorm| -> Result<Var> {
        let y = s.g.mul_channel(x, gate)?;
        let y = s.g.mul_pixel(y, map)?;
        let y = conv.forward(s, y)?;
        let y = bn.forward(s, y)?;
        Ok(if final_sigmoid { s.g.sigmoid(y) } else { y })
    };
    let l = branch(s, xl, act.s_spa, maps.m_spa, &combo.conv_l, &combo.bn_l)?;
    let u = branch(s, xu, act.s_sem, maps.m_sem, &combo.conv_u, &combo.bn_u)?;
    Ok((act, maps, s.g.add(l, u)?))
}

/// One fusion site joining level `level` with the upsampled coarser output.
#[derive(Clone, Debug)]
pub struct Merge {
    pub level: usize,
    pub deconv: Option<Deconv2x>,
    pub ca: Option<CompetitiveAttention>,
    pub srr: Option<SpatialRecalibration>,
    pub combo: Option<Combination>,
    pub smooth: Option<Conv2d>,
}

/// Per-level results, finest first.
#[derive(Clone, Debug)]
pub struct PyramidOutput {
    pub laterals: Vec<Var>,
    /// X_P per level; the coarsest entry is its lateral projection.
    pub fused: Vec<Var>,
    /// What the classifier consumes (smoothed when enabled).
    pub outputs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub cfg: PyramidConfig,
    pub laterals: Vec<Conv2d>,
    /// Indexed by finer level; `merges[i]` fuses level i+1.
    pub merges: Vec<Merge>,
}

impl Pyramid {
    pub fn new<R: Rng + ?Sized>(
        cfg: PyramidConfig,
        level_channels: &[usize],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if level_channels.len() < 2 {
            return Err(Error::Config(format!(
                "a pyramid needs at least 2 levels, got {}",
                level_channels.len()
            )));
        }
        let c = cfg.width;
        let laterals = level_channels
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("pyramid/lateral{}", i + 1),
                    ConvShape::new(cin, c, 1).bias(),
                )
            })
            .collect();
        let mut merges = Vec::new();
        for level in 1..level_channels.len() {
            let name = format!("pyramid/merge{level}");
            let deconv = (cfg.upsample == Upsample::Deconv)
                .then(|| Deconv2x::new(store, rng, &format!("{name}/deconv"), c));
            let ca = cfg.fusion.uses_ca().then(|| {
                CompetitiveAttention::new(
                    store,
                    rng,
                    &format!("{name}/ca"),
                    c,
                    cfg.reduction,
                    cfg.attention_init,
                )
            });
            let srr = cfg.fusion.uses_srr().then(|| {
                SpatialRecalibration::new(store, rng, &format!("{name}/srr"), cfg.attention_init)
            });
            let combo = (cfg.fusion == Fusion::SrrCa).then(|| Combination::new(store, rng, &name, c));
            let smooth = cfg.smoothing.then(|| {
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}/smooth"),
                    ConvShape::new(c, c, 3).pad(1).bias(),
                )
            });
            merges.push(Merge {
                level,
                deconv,
                ca,
                srr,
                combo,
                smooth,
            });
        }
        Ok(Self {
            cfg,
            laterals,
            merges,
        })
    }

    pub fn upsample(&self, s: &mut Session, merge: &Merge, x: Var) -> Result<Var> {
        Ok(match self.cfg.upsample {
            Upsample::Bilinear => s.g.bilinear_up2(x)?,
            Upsample::Nearest => s.g.nearest_up2(x)?,
            Upsample::Deconv => merge
                .deconv
                .as_ref()
                .expect("deconv merges own a kernel")
                .forward(s, x)?,
        })
    }

    fn fuse(&self, s: &mut Session, m: &Merge, xl: Var, xu: Var) -> Result<Var> {
        let lv = m.level;
        let (sl, su) = (s.g.shape(xl).to_vec(), s.g.shape(xu).to_vec());
        if sl != su {
            return Err(Error::Shape(format!(
                "level {lv}: lateral {sl:?} and upsampled {su:?} differ"
            )));
        }
        let record_ca = |s: &mut Session, a: CaActivations| {
            s.record(|| format!("ca/level{lv}/spa"), a.s_spa);
            s.record(|| format!("ca/level{lv}/sem"), a.s_sem);
        };
        let record_srr = |s: &mut Session, m: SrrMaps| {
            s.record(|| format!("srr/level{lv}/spa"), m.m_spa);
            s.record(|| format!("srr/level{lv}/sem"), m.m_sem);
        };
        match self.cfg.fusion {
            Fusion::Plain => fuse_plain(s, xl, xu),
            Fusion::Ca => {
                let (a, out) = competitive_attention(s, m.ca.as_ref().expect("ca"), xl, xu)?;
                record_ca(s, a);
                Ok(out)
            }
            Fusion::Srr => {
                let (maps, out) = fuse_srr(s, m.srr.as_ref().expect("srr"), xl, xu)?;
                record_srr(s, maps);
                Ok(out)
            }
            Fusion::SrrCa => {
                let (a, maps, out) = fuse_srr_ca(
                    s,
                    m.ca.as_ref().expect("ca"),
                    m.srr.as_ref().expect("srr"),
                    m.combo.as_ref().expect("combo"),
                    self.cfg.final_sigmoid,
                    xl,
                    xu,
                )?;
                record_ca(s, a);
                record_srr(s, maps);
                Ok(out)
            }
        }
    }

    /// Builds the pyramid over backbone levels ordered fine → coarse.
    pub fn forward(&self, s: &mut Session, levels: &[Var]) -> Result<PyramidOutput> {
        if levels.len() != self.laterals.len() {
            return Err(Error::Config(format!(
                "pyramid built for {} levels, got {}",
                self.laterals.len(),
                levels.len()
            )));
        }
        let mut laterals = Vec::with_capacity(levels.len());
        for (i, (conv, &x)) in self.laterals.iter().zip(levels).enumerate() {
            let xl = conv.forward(s, x)?;
            s.record(|| format!("lateral/level{}", i + 1), xl);
            laterals.push(xl);
        }
        let top = levels.len() - 1;
        let mut fused = vec![laterals[top]; levels.len()];
        let mut outputs = fused.clone();
        for m in self.merges.iter().rev() {
            let i = m.level - 1;
            let xu = self.upsample(s, m, fused[i + 1])?;
            s.record(|| format!("upsample/level{}", m.level), xu);
            let xp = self.fuse(s, m, laterals[i], xu)?;
            s.record(|| format!("fused/level{}", m.level), xp);
            fused[i] = xp;
            outputs[i] = match &m.smooth {
                Some(conv) => conv.forward(s, xp)?,
                None => xp,
            };
        }
        s.record(|| format!("fused/level{}", top + 1), fused[top]);
        Ok(PyramidOutput {
            laterals,
            fused,
            outputs,
        })
    }

    /// Sets every combination branch to identity with pass-through BN.
    pub fn set_combination_passthrough(&self, store: &mut ParamStore) {
        for combo in self.merges.iter().filter_map(|m| m.combo.as_ref()) {
            combo.set_passthrough(store);
        }
    }
}
