//! Forward sessions and the parameterized layers built on them.
//!
//! A [`Session`] owns one autograd graph and binds store entries into it on
//! first use, so a forward pass never copies parameters it does not touch.

use cafpn_tensor::{Gradients, Graph, Tensor, Var, BN_EPS, BN_MOMENTUM};
use rand::Rng;

use crate::error::Result;
use crate::params::{he_normal, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Test hooks that override learned quantities inside a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks {
    /// Replace every CA activation and SRR map with exact ones.
    pub force_attention_ones: bool,
}

/// Batch statistics observed in train mode, pending a running-stat update.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased (n − 1) batch variance.
    pub batch_var: Vec<f64>,
}

pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    pub hooks: Hooks,
    updates: Vec<StatUpdate>,
    trace: Option<Vec<(String, Var)>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, track_grads: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads,
            hooks: Hooks::default(),
            updates: Vec::new(),
            trace: None,
        }
    }

    /// Gradient-free evaluation.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, Mode::Eval, false)
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let entry = self.store.entry(id);
        let v = self
            .g
            .leaf(entry.value.clone(), self.track_grads && entry.learnable);
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    /// Records `v` under `key` when tracing; otherwise a no-op.
    pub fn record(&mut self, key: impl FnOnce() -> String, v: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((key(), v));
        }
    }

    pub fn traced(&self) -> Vec<(String, Tensor)> {
        self.trace
            .iter()
            .flatten()
            .map(|(k, v)| (k.clone(), self.g.value(*v).clone()))
            .collect()
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of every learnable entry that took part in the pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .filter_map(|(i, v)| grads.get(v).map(|g| (ParamId::from_index(i), g.clone())))
            .collect()
    }
}

/// Folds train-mode batch statistics into the running estimates.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        let blend = |running: &mut Tensor, batch: &[f64]| {
            for (r, b) in running.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        };
        blend(store.get_mut(u.running_mean), &u.batch_mean);
        blend(store.get_mut(u.running_var), &u.batch_var);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvShape {
    pub fn new(cin: usize, cout: usize, k: usize) -> Self {
        Self {
            cin,
            cout,
            k,
            stride: 1,
            pad: 0,
            bias: false,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = p;
        self
    }

    pub fn bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        s: ConvShape,
    ) -> Self {
        let shape = [s.cout, s.cin, s.k, s.k];
        let w = store.learnable(
            format!("{name}/w"),
            he_normal(&shape, s.cin * s.k * s.k, rng),
        );
        let b = s
            .bias
            .then(|| store.learnable(format!("{name}/b"), Tensor::zeros(&[s.cout])));
        Self {
            w,
            b,
            stride: s.stride,
            pad: s.pad,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = self.b.map(|b| s.param(b));
        Ok(s.g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

/// Learned ×2 upsampling: 4×4 kernel, stride 2, pad 1.
#[derive(Clone, Debug)]
pub struct Deconv2x {
    pub w: ParamId,
}

impl Deconv2x {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> Self {
        // Each output pixel sees k²/stride² = 4 taps per input channel.
        let w = store.learnable(format!("{name}/w"), he_normal(&[c, c, 4, 4], 4 * c, rng));
        Self { w }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        Ok(s.g.conv_transpose2d(x, w, 2, 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.learnable(format!("{name}/gamma"), Tensor::ones(&[c])),
            beta: store.learnable(format!("{name}/beta"), Tensor::zeros(&[c])),
            running_mean: store.buffer(format!("{name}/running_mean"), Tensor::zeros(&[c])),
            running_var: store.buffer(format!("{name}/running_var"), Tensor::ones(&[c])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let (y, stats) = s.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let n = stats.count as f64;
                let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
                s.updates.push(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    batch_mean: stats.mean,
                    batch_var: stats.var.iter().map(|v| v * correction).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = s.store;
                let mean = store.get(self.running_mean).data();
                let var = store.get(self.running_var).data();
                Ok(s.g.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)?)
            }
        }
    }

    /// Sets this layer to an exact identity in eval mode: γ = 1, β = 0,
    /// running mean 0 and running variance 1 − ε so that var + ε == 1.
    pub fn set_passthrough(&self, store: &mut ParamStore) {
        let c = store.get(self.gamma).numel();
        store.get_mut(self.gamma).data_mut().fill(1.0);
        store.get_mut(self.beta).data_mut().fill(0.0);
        store.get_mut(self.running_mean).data_mut().fill(0.0);
        store
            .get_mut(self.running_var)
            .data_mut()
            .copy_from_slice(&vec![1.0 - BN_EPS; c]);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        Self {
            w: store.learnable(format!("{name}/w"), he_normal(&[outputs, inputs], inputs, rng)),
            b: store.learnable(format!("{name}/b"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let b = s.param(self.b);
        Ok(s.g.linear(x, w, Some(b))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn passthrough_bn_is_exact_identity() {
        assert_eq!((1.0 - BN_EPS) + BN_EPS, 1.0);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        bn.set_passthrough(&mut store);
        let x = Tensor::randn(&[2, 3, 4, 4], 3.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut s = Session::eval(&store);
        let xv = s.input(x.clone());
        let y = bn.forward(&mut s, xv).unwrap();
        assert_eq!(s.g.value(y), &x);
    }

    #[test]
    fn running_stats_follow_momentum_with_unbiased_variance() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let updates = {
            let mut s = Session::new(&store, Mode::Train, true);
            let xv = s.input(x);
            bn.forward(&mut s, xv).unwrap();
            s.take_stat_updates()
        };
        apply_stat_updates(&mut store, &updates);
        // mean 3, unbiased variance 14/3
        let m = store.get(bn.running_mean).data()[0];
        let v = store.get(bn.running_var).data()[0];
        assert!((m - 0.3).abs() < 1e-15);
        assert!((v - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn param_grads_cover_only_bound_learnables() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let used = Linear::new(&mut store, &mut rng, "used", 3, 2);
        let _unused = Linear::new(&mut store, &mut rng, "unused", 3, 2);
        let mut s = Session::new(&store, Mode::Train, true);
        let x = s.input(Tensor::ones(&[1, 3]));
        let y = used.forward(&mut s, x).unwrap();
        let l = s.g.sum(y);
        let grads = s.g.backward(l).unwrap();
        let pg = s.param_grads(&grads);
        assert_eq!(pg.len(), 2);
        assert_eq!(pg[0].0, used.w);
        assert_eq!(pg[0].1.data(), &[1.0; 6]);
    }
}
