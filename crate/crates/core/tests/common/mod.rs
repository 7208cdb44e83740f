//! Scalar reference recomputations of the fusion modules, shared by the
//! fusion tests and the acceptance suite.
#![allow(dead_code)]

use cafpn_core::nn::BatchNorm;
use cafpn_core::params::ParamStore;
use cafpn_core::pyramid::{AttentionInit, Combination, CompetitiveAttention, SpatialRecalibration};
use cafpn_tensor::{Tensor, BN_EPS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const N: usize = 2;
pub const C: usize = 4;
pub const T: usize = 2;
pub const H: usize = 8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn pair(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (
        Tensor::randn(&[N, C, H, H], 1.0, &mut r),
        Tensor::randn(&[N, C, H, H], 1.0, &mut r),
    )
}

pub fn at(t: &Tensor, n: usize, c: usize, i: usize, j: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + i) * s[3] + j]
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn randomize_bn(store: &mut ParamStore, bn: &BatchNorm, seed: u64) {
    let mut r = rng(seed);
    let c = store.get(bn.gamma).numel();
    store.set(bn.gamma, Tensor::uniform(&[c], 0.5, 1.5, &mut r)).unwrap();
    store.set(bn.beta, Tensor::randn(&[c], 0.3, &mut r)).unwrap();
    store.set(bn.running_mean, Tensor::randn(&[c], 0.2, &mut r)).unwrap();
    store.set(bn.running_var, Tensor::uniform(&[c], 0.5, 2.0, &mut r)).unwrap();
}

pub fn randomize_bias(store: &mut ParamStore, id: cafpn_core::params::ParamId, seed: u64) {
    let n = store.get(id).numel();
    store.set(id, Tensor::randn(&[n], 0.5, &mut rng(seed))).unwrap();
}

/// Global pooling, excitation MLP, sigmoid, split: returns (s_spa, s_sem).
pub fn ca_oracle(xl: &Tensor, xu: &Tensor, w1: &Tensor, w2: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let hidden = w1.shape()[0];
    let mut spa = Vec::new();
    let mut sem = Vec::new();
    for n in 0..N {
        let mut u = vec![0.0; 2 * C];
        for c in 0..C {
            for i in 0..H {
                for j in 0..H {
                    u[c] += at(xl, n, c, i, j);
                    u[C + c] += at(xu, n, c, i, j);
                }
            }
        }
        for v in &mut u {
            *v /= (H * H) as f64;
        }
        let mut z = vec![0.0; hidden];
        for (k, zk) in z.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, um) in u.iter().enumerate() {
                acc += w1.data()[k * 2 * C + m] * um;
            }
            *zk = acc.max(0.0);
        }
        let mut s = [0.0; 2 * C];
        for (m, sm) in s.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, zk) in z.iter().enumerate() {
                acc += w2.data()[m * hidden + k] * zk;
            }
            *sm = sigmoid(acc);
        }
        spa.push(s[..C].to_vec());
        sem.push(s[C..].to_vec());
    }
    (spa, sem)
}

pub struct BnValues {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn bn_values(store: &ParamStore, bn: &BatchNorm) -> BnValues {
    BnValues {
        gamma: store.get(bn.gamma).data().to_vec(),
        beta: store.get(bn.beta).data().to_vec(),
        mean: store.get(bn.running_mean).data().to_vec(),
        var: store.get(bn.running_var).data().to_vec(),
    }
}

/// Cross-channel means, strided 3×3 conv, BN, bilinear ×2, 1×1 conv,
/// sigmoid. `train` uses batch statistics in place of the running ones.
/// Returns maps indexed [n][flow][i][j].
pub fn srr_oracle(
    xl: &Tensor,
    xu: &Tensor,
    w3: &Tensor,
    bn: &BnValues,
    w1: &Tensor,
    b1: &Tensor,
    train: bool,
) -> Vec<[[[f64; H]; H]; 2]> {
    let hh = H / 2;
    // cross-channel means, [n][flow][i][j]
    let mut s = vec![[[[0.0; H]; H]; 2]; N];
    for n in 0..N {
        for i in 0..H {
            for j in 0..H {
                for c in 0..C {
                    s[n][0][i][j] += at(xl, n, c, i, j) / C as f64;
                    s[n][1][i][j] += at(xu, n, c, i, j) / C as f64;
                }
            }
        }
    }
    // 3×3 stride-2 pad-1 convolution
    let mut d = vec![vec![vec![vec![0.0; hh]; hh]; 2]; N];
    for n in 0..N {
        for o in 0..2 {
            for oy in 0..hh {
                for ox in 0..hh {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if (0..H as isize).contains(&iy) && (0..H as isize).contains(&ix) {
                                    acc += s[n][ci][iy as usize][ix as usize]
                                        * w3.data()[((o * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    d[n][o][oy][ox] = acc;
                }
            }
        }
    }
    // batch norm
    for o in 0..2 {
        let (mean, var) = if train {
            let vals: Vec<f64> = (0..N)
                .flat_map(|n| d[n][o].iter().flatten().copied().collect::<Vec<_>>())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        } else {
            (bn.mean[o], bn.var[o])
        };
        for plane in d.iter_mut() {
            for row in plane[o].iter_mut() {
                for x in row.iter_mut() {
                    *x = bn.gamma[o] * (*x - mean) / (var + BN_EPS).sqrt() + bn.beta[o];
                }
            }
        }
    }
    // bilinear ×2 with half-pixel centers, then 1×1 conv and sigmoid
    let coord = |dst: usize| {
        let f = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let lo = (f.floor() as usize).min(hh - 1);
        let hi = (lo + 1).min(hh - 1);
        (lo, hi, f - lo as f64)
    };
    let mut out = vec![[[[0.0; H]; H]; 2]; N];
    for n in 0..N {
        for i in 0..H {
            let (y0, y1, fy) = coord(i);
            for j in 0..H {
                let (x0, x1, fx) = coord(j);
                let mut up = [0.0; 2];
                for (ci, u) in up.iter_mut().enumerate() {
                    let p = &d[n][ci];
                    *u = (1.0 - fy) * ((1.0 - fx) * p[y0][x0] + fx * p[y0][x1])
                        + fy * ((1.0 - fx) * p[y1][x0] + fx * p[y1][x1]);
                }
                for o in 0..2 {
                    let v = b1.data()[o] + w1.data()[o * 2] * up[0] + w1.data()[o * 2 + 1] * up[1];
                    out[n][o][i][j] = sigmoid(v);
                }
            }
        }
    }
    out
}

pub struct Site {
    pub store: ParamStore,
    pub ca: CompetitiveAttention,
    pub srr: SpatialRecalibration,
    pub combo: Combination,
}

pub fn site(seed: u64, init: AttentionInit) -> Site {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let ca = CompetitiveAttention::new(&mut store, &mut r, "ca", C, T, init);
    let srr = SpatialRecalibration::new(&mut store, &mut r, "srr", init);
    let combo = Combination::new(&mut store, &mut r, "m", C);
    if init == AttentionInit::Random {
        randomize_bn(&mut store, &srr.bn, seed + 1);
        randomize_bn(&mut store, &combo.bn_l, seed + 2);
        randomize_bn(&mut store, &combo.bn_u, seed + 3);
        randomize_bias(&mut store, srr.conv1.b.unwrap(), seed + 4);
    }
    Site {
        store,
        ca,
        srr,
        combo,
    }
}
