//! Convex mixing of input pairs and their label distributions.

use cafpn_tensor::Tensor;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Final epochs trained with plain augmentation after mixup.
pub const MIXUP_TAIL_EPOCHS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub alpha: f64,
    /// First epoch (0-based) at which mixing stops.
    pub disable_after_epoch: usize,
}

impl MixupConfig {
    pub fn for_epochs(epochs: usize) -> Self {
        Self {
            alpha: 1.0,
            disable_after_epoch: epochs.saturating_sub(MIXUP_TAIL_EPOCHS),
        }
    }

    pub fn active(&self, epoch: usize) -> bool {
        epoch < self.disable_after_epoch
    }

    /// λ ~ Beta(α, α) during active epochs, exactly 1 afterwards.
    pub fn sample_lambda<R: Rng + ?Sized>(&self, epoch: usize, rng: &mut R) -> Result<f64> {
        if !self.active(epoch) {
            return Ok(1.0);
        }
        let beta = Beta::new(self.alpha, self.alpha)
            .map_err(|e| Error::Config(format!("mixup alpha {}: {e}", self.alpha)))?;
        Ok(beta.sample(rng))
    }
}

/// x̃ = λ·x_a + (1−λ)·x_b and ỹ = λ·y_a + (1−λ)·y_b.
pub fn mixup_batch(
    xa: &Tensor,
    ya: &Tensor,
    xb: &Tensor,
    yb: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixup λ = {lambda} outside [0, 1]")));
    }
    let mix = |a: &Tensor, b: &Tensor| a.zip_map(b, |u, v| lambda * u + (1.0 - lambda) * v);
    Ok((mix(xa, xb)?, mix(ya, yb)?))
}

/// One-hot rows for `labels` over `k` classes.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}
