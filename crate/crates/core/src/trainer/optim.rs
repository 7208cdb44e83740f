//! SGD with Nesterov momentum and coupled L2 weight decay.

use cafpn_tensor::Tensor;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// `g ← ∇ + wd·θ; v ← μ·v + g; θ ← θ − lr·(g + μ·v)`, with a velocity
/// buffer per parameter that persists across steps.
#[derive(Clone, Debug)]
pub struct SgdNesterov {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl SgdNesterov {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.index()).and_then(Option::as_ref)
    }

    /// Applies one update. Every gradient is screened first, so a
    /// non-finite entry aborts before any parameter moves.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let bad = g.data().iter().filter(|v| !v.is_finite()).count();
            if bad > 0 {
                return Err(Error::NonFiniteGradient {
                    name: store.name(*id).to_string(),
                    count: bad,
                });
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (mu, wd) = (self.momentum, self.weight_decay);
        for (id, grad) in grads {
            let theta = store.get_mut(*id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            for ((t, vi), &gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                let g = gi + wd * *t;
                *vi = mu * *vi + g;
                *t -= lr * (g + mu * *vi);
            }
        }
        Ok(())
    }
}
