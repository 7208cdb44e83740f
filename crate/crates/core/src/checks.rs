//! Finite-difference gradient checks over parameter stores, the toy models
//! they run on, and the named suite exposed by the command line.

use cafpn_tensor::gradcheck::{check_gradients, rel_error, GradCheckOptions, GradCheckReport, Mismatch};
use cafpn_tensor::{Graph, Tensor, Var, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneSpec, Family};
use crate::error::{Error, Result};
use crate::model::{Head, Model, ModelSpec};
use crate::nn::{Mode, Session};
use crate::params::ParamStore;
use crate::pyramid::{
    competitive_attention, fuse_srr, fuse_srr_ca, AttentionInit, Combination,
    CompetitiveAttention, Fusion, PyramidConfig, SpatialRecalibration,
};

/// Relative-error bound every check must stay under.
pub const GRAD_TOL: f64 = 1e-4;

/// Denominator floor of the relative error. Central differences with
/// h = 1e-5 carry about 1e-11 of absolute round-off on an O(1) loss, so
/// derivatives much smaller than this cannot be resolved relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// Smallest step a kink-straddling stencil is refined to, relative to h.
const MIN_STEP_RATIO: f64 = 1e-3;

pub fn default_options() -> GradCheckOptions {
    GradCheckOptions {
        floor: REL_FLOOR,
        ..GradCheckOptions::default()
    }
}

/// Compares store gradients from one backward pass against central
/// differences of the forward pass, for every learnable entry.
pub fn check_store<F>(
    store: &ParamStore,
    mode: Mode,
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store, mode, true);
        let loss = build(&mut s)?;
        let grads = s.g.backward(loss)?;
        s.param_grads(&grads)
    };
    let mut work = store.clone();
    let eval = |st: &ParamStore| -> Result<(f64, Vec<usize>)> {
        let mut s = Session::new(st, mode, false);
        let loss = build(&mut s)?;
        Ok((s.g.value(loss).item(), s.g.branch_pattern()))
    };
    let (_, base_pattern) = eval(store)?;
    let mut report = GradCheckReport::default();
    for (id, grad) in analytic {
        let n = grad.numel();
        let stride = match opts.max_entries_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            let mut h = opts.step;
            let numeric = loop {
                work.get_mut(id).data_mut()[i] = orig + h;
                let (up, pu) = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig - h;
                let (down, pd) = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig;
                if (pu == base_pattern && pd == base_pattern) || h <= opts.step * MIN_STEP_RATIO {
                    if pu != base_pattern || pd != base_pattern {
                        report.kinked += 1;
                    }
                    break (up - down) / (2.0 * h);
                }
                // The stencil straddles a ReLU or max-pool switch, where the
                // loss is not differentiable: shrink it.
                h /= 10.0;
                report.refined += 1;
            };
            let a = grad.data()[i];
            let err = rel_error(a, numeric, opts.floor);
            report.merge(GradCheckReport {
                checked: 1,
                max_rel_error: err,
                worst: Some(Mismatch {
                    input: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                }),
                ..Default::default()
            });
        }
    }
    Ok(report)
}

/// A miniature CIFAR-style model: 16×16 input, three levels, C_d = 8, t = 2.
pub fn toy_spec(fusion: Fusion, num_classes: usize) -> ModelSpec {
    let backbone = BackboneSpec::custom(Family::Cifar, 4, vec![4, 8, 8], vec![1, 1, 1], 16)
        .expect("toy layout is valid");
    let mut pyramid = PyramidConfig::new(8, fusion);
    pyramid.reduction = 2;
    ModelSpec {
        backbone,
        pyramid,
        num_classes,
        head: Head::ConcatGap,
    }
}

/// Moves every BN layer and bias away from its initial value so that no
/// gradient path is trivially zero, and eval-mode BN is not an identity.
pub fn perturb_for_check<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.get(id).numel();
        let value = if name.ends_with("/gamma") {
            Tensor::uniform(&[n], 0.5, 1.5, rng)
        } else if name.ends_with("/beta") || name.ends_with("/b") {
            Tensor::randn(&[n], 0.2, rng)
        } else if name.ends_with("/running_mean") {
            Tensor::randn(&[n], 0.1, rng)
        } else if name.ends_with("/running_var") {
            Tensor::uniform(&[n], 0.5, 1.5, rng)
        } else {
            continue;
        };
        store.set(id, value).expect("same shape");
    }
}

fn soft_target<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform(&[n, k], 0.1, 1.0, rng);
    for row in t.data_mut().chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Whole-model check on a 2×3×16×16 batch with eval-mode BN.
pub fn check_model(fusion: Fusion, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(toy_spec(fusion, 3), seed)?;
    perturb_for_check(&mut model.store, &mut rng);
    let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng);
    let target = soft_target(2, 3, &mut rng);
    let m = &model;
    check_store(
        &model.store,
        Mode::Eval,
        |s| {
            let xv = s.input(x.clone());
            let logits = m.forward(s, xv)?;
            Ok(s.g.softmax_cross_entropy(logits, &target)?)
        },
        opts,
    )
}

/// Fusion-site check with the two flows registered as learnable entries so
/// that input gradients are covered too.
fn check_fusion(fusion: Fusion, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    const C: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let xl = store.learnable("xl", Tensor::randn(&[2, C, 8, 8], 1.0, &mut rng));
    let xu = store.learnable("xu", Tensor::randn(&[2, C, 8, 8], 1.0, &mut rng));
    let ca = CompetitiveAttention::new(&mut store, &mut rng, "ca", C, 2, AttentionInit::Random);
    let srr = SpatialRecalibration::new(&mut store, &mut rng, "srr", AttentionInit::Random);
    let combo = Combination::new(&mut store, &mut rng, "merge", C);
    perturb_for_check(&mut store, &mut rng);
    let probe = Tensor::randn(&[2, C, 8, 8], 1.0, &mut rng);
    check_store(
        &store,
        Mode::Eval,
        |s| {
            let (l, u) = (s.param(xl), s.param(xu));
            let out = match fusion {
                Fusion::Ca => competitive_attention(s, &ca, l, u)?.1,
                Fusion::Srr => fuse_srr(s, &srr, l, u)?.1,
                _ => fuse_srr_ca(s, &ca, &srr, &combo, false, l, u)?.2,
            };
            let p = s.input(probe.clone());
            let y = s.g.mul(out, p)?;
            Ok(s.g.sum(y))
        },
        opts,
    )
}

type OpBuild = fn(&mut Graph, &[Var]) -> cafpn_tensor::Result<Var>;

fn probe(g: &mut Graph, y: Var) -> cafpn_tensor::Result<Var> {
    let shape = g.shape(y).to_vec();
    // Fixed random weights so every output entry matters.
    let p = g.constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(0x5EED)));
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpBuild)> {
    vec![
        ("conv2d", vec![vec![2, 3, 5, 6], vec![4, 3, 3, 3], vec![4]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(g, y)
        }),
        ("deconv", vec![vec![2, 3, 3, 4], vec![3, 2, 4, 4]], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], 2, 1)?;
            probe(g, y)
        }),
        ("bilinear", vec![vec![2, 3, 3, 5]], |g, v| {
            let y = g.bilinear_up2(v[0])?;
            probe(g, y)
        }),
        ("nearest", vec![vec![2, 2, 4, 3]], |g, v| {
            let y = g.nearest_up2(v[0])?;
            probe(g, y)
        }),
        ("gap", vec![vec![2, 3, 4, 5]], |g, v| {
            let y = g.global_avg_pool(v[0])?;
            probe(g, y)
        }),
        ("channel_mean", vec![vec![2, 3, 4, 5]], |g, v| {
            let y = g.channel_mean(v[0])?;
            probe(g, y)
        }),
        ("max_pool", vec![vec![2, 2, 7, 7]], |g, v| {
            let y = g.max_pool2d(v[0], 3, 2, 1)?;
            probe(g, y)
        }),
        ("batch_norm_train", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2], BN_EPS)?;
            probe(g, y)
        }),
        ("batch_norm_eval", vec![vec![3, 2, 3, 3], vec![2], vec![2]], |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[0.5, 1.7], BN_EPS)?;
            probe(g, y)
        }),
        ("relu", vec![vec![3, 4]], |g, v| {
            let y = g.relu(v[0]);
            probe(g, y)
        }),
        ("sigmoid", vec![vec![3, 4]], |g, v| {
            let y = g.sigmoid(v[0]);
            probe(g, y)
        }),
        ("linear", vec![vec![3, 5], vec![4, 5], vec![4]], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y)
        }),
        ("add_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let s = g.add(v[0], v[1])?;
            let y = g.mul(s, v[1])?;
            probe(g, y)
        }),
        ("mul_channel", vec![vec![2, 3, 2, 3], vec![2, 3]], |g, v| {
            let y = g.mul_channel(v[0], v[1])?;
            probe(g, y)
        }),
        ("mul_pixel", vec![vec![2, 3, 2, 3], vec![2, 1, 2, 3]], |g, v| {
            let y = g.mul_pixel(v[0], v[1])?;
            probe(g, y)
        }),
        ("concat_narrow", vec![vec![2, 2, 3, 3], vec![2, 3, 3, 3]], |g, v| {
            let c = g.concat(&[v[0], v[1]])?;
            let y = g.narrow(c, 1, 3)?;
            probe(g, y)
        }),
        ("cross_entropy", vec![vec![2, 3]], |g, v| {
            let t = Tensor::from_vec(&[2, 3], vec![0.2, 0.5, 0.3, 0.0, 1.0, 0.0])?;
            g.softmax_cross_entropy(v[0], &t)
        }),
    ]
}

pub fn op_names() -> Vec<&'static str> {
    op_cases().into_iter().map(|(n, _, _)| n).collect()
}

pub const FUSION_CHECKS: [&str; 3] = ["ca", "srr", "srr_ca"];
pub const MODEL_CHECKS: [&str; 4] = ["fpn", "fpn-ca", "fpn-srr", "fpn-srr-ca"];

/// Every name `run_check` accepts.
pub fn all_check_names() -> Vec<&'static str> {
    let mut v = op_names();
    v.extend(FUSION_CHECKS);
    v.extend(MODEL_CHECKS);
    v
}

/// Runs one named check with inputs drawn from `seed`.
pub fn run_check(name: &str, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    if let Some((_, shapes, build)) = op_cases().into_iter().find(|(n, _, _)| *n == name) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{name}/input{i}"), Tensor::randn(s, 1.0, &mut rng)))
            .collect();
        return Ok(check_gradients(&inputs, build, opts)?);
    }
    match name {
        "ca" => check_fusion(Fusion::Ca, seed, opts),
        "srr" => check_fusion(Fusion::Srr, seed, opts),
        "srr_ca" => check_fusion(Fusion::SrrCa, seed, opts),
        _ => match MODEL_CHECKS.iter().position(|m| *m == name) {
            Some(i) => {
                let fusion = [Fusion::Plain, Fusion::Ca, Fusion::Srr, Fusion::SrrCa][i];
                check_model(fusion, seed, opts)
            }
            None => Err(Error::Config(format!(
                "unknown check `{name}`; available: {}",
                all_check_names().join(", ")
            ))),
        },
    }
}
