/// Per-channel batch statistics over N×H×W: returns `(mean, biased variance)`.
pub fn channel_stats(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for b in 0..n {
            q += x[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

/// `y = (x − mean)·inv_std·gamma + beta` per channel; returns `(y, x_hat)`.
#[allow(clippy::too_many_arguments)]
pub fn normalize(
    x: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[f64],
    denom: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
            for i in r {
                let h = (x[i] - mean[ch]) / denom[ch];
                xhat[i] = h;
                y[i] = h * gamma[ch] + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Gradients of a train-mode batch norm given the saved normalized input.
/// Returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_train_backward(
    gout: &[f64],
    xhat: &[f64],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[f64],
    denom: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dgamma[ch] += gout[i] * xhat[i];
                dbeta[ch] += gout[i];
            }
        }
    }
    let mut dx = vec![0.0; gout.len()];
    for b in 0..n {
        for ch in 0..c {
            // dx = gamma/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
            let k = gamma[ch] / denom[ch];
            let mdy = dbeta[ch] / count;
            let mdyx = dgamma[ch] / count;
            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                dx[i] = k * (gout[i] - mdy - xhat[i] * mdyx);
            }
        }
    }
    (dx, dgamma, dbeta)
}
