//! Naive loop reference implementations. Written directly from the
//! definitions; none of them share code with the kernels they check.
#![allow(dead_code)]

use cafpn_tensor::Tensor;

fn idx4(s: &[usize], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * s[1] + c) * s[2] + h) * s[3] + w
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x.data()[idx4(xs, bn, ci, iy as usize, ix as usize)]
                                    * w.data()[idx4(ws, co, ci, ki, kj)];
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
}

/// Scatter-accumulate definition of a transposed convolution (weight Cin×Cout×kh×kw).
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.data()[idx4(xs, bn, ci, iy, ix)];
                    for co in 0..cout {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((bn * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w.data()[idx4(ws, ci, co, ki, kj)];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
}

/// Bilinear ×2 evaluated pointwise from the interpolation weights.
pub fn bilinear_up2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = |d: usize, len: usize| -> (usize, usize, f64) {
        let mut f = (d as f64 + 0.5) * 0.5 - 0.5;
        if f < 0.0 {
            f = 0.0;
        }
        let i0 = f.floor() as usize;
        let i0 = if i0 > len - 1 { len - 1 } else { i0 };
        let i1 = if i0 + 1 > len - 1 { len - 1 } else { i0 + 1 };
        (i0, i1, f - i0 as f64)
    };
    let mut out = Vec::new();
    for bn in 0..n {
        for ch in 0..c {
            for oy in 0..2 * h {
                let (y0, y1, fy) = src(oy, h);
                for ox in 0..2 * w {
                    let (x0, x1, fx) = src(ox, w);
                    let v = |yy, xx| x.data()[idx4(s, bn, ch, yy, xx)];
                    out.push(
                        (1.0 - fy) * (1.0 - fx) * v(y0, x0)
                            + (1.0 - fy) * fx * v(y0, x1)
                            + fy * (1.0 - fx) * v(y1, x0)
                            + fy * fx * v(y1, x1),
                    );
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, 2 * h, 2 * w], out).unwrap()
}

pub fn nearest_up2(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Vec::new();
    for bn in 0..s[0] {
        for ch in 0..s[1] {
            for oy in 0..2 * s[2] {
                for ox in 0..2 * s[3] {
                    out.push(x.data()[idx4(s, bn, ch, oy / 2, ox / 2)]);
                }
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], 2 * s[2], 2 * s[3]], out).unwrap()
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Vec::new();
    for bn in 0..s[0] {
        for ch in 0..s[1] {
            let mut acc = 0.0;
            for i in 0..s[2] {
                for j in 0..s[3] {
                    acc += x.data()[idx4(s, bn, ch, i, j)];
                }
            }
            out.push(acc / (s[2] * s[3]) as f64);
        }
    }
    Tensor::from_vec(&[s[0], s[1]], out).unwrap()
}

pub fn channel_mean(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Vec::new();
    for bn in 0..s[0] {
        for i in 0..s[2] {
            for j in 0..s[3] {
                let mut acc = 0.0;
                for ch in 0..s[1] {
                    acc += x.data()[idx4(s, bn, ch, i, j)];
                }
                out.push(acc / s[1] as f64);
            }
        }
    }
    Tensor::from_vec(&[s[0], 1, s[2], s[3]], out).unwrap()
}

/// Train-mode batch norm from the textbook formula; also returns the batch
/// mean and biased variance.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = (s[0] * s[2] * s[3]) as f64;
    let mut means = vec![0.0; s[1]];
    let mut vars = vec![0.0; s[1]];
    for ch in 0..s[1] {
        let mut vals = Vec::new();
        for bn in 0..s[0] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    vals.push(x.data()[idx4(s, bn, ch, i, j)]);
                }
            }
        }
        let mu = vals.iter().sum::<f64>() / m;
        means[ch] = mu;
        vars[ch] = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
    }
    let mut out = x.clone();
    for bn in 0..s[0] {
        for ch in 0..s[1] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let k = idx4(s, bn, ch, i, j);
                    out.data_mut()[k] =
                        gamma[ch] * (x.data()[k] - means[ch]) / (vars[ch] + eps).sqrt() + beta[ch];
                }
            }
        }
    }
    (out, means, vars)
}

pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor {
    let s = x.shape();
    let mut out = x.clone();
    for bn in 0..s[0] {
        for ch in 0..s[1] {
            for i in 0..s[2] {
                for j in 0..s[3] {
                    let k = idx4(s, bn, ch, i, j);
                    out.data_mut()[k] =
                        gamma[ch] * (x.data()[k] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
                }
            }
        }
    }
    out
}

/// Maximum over the in-bounds part of each window; padding never wins.
pub fn max_pool2d(x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let oh = (s[2] + 2 * pad - k) / stride + 1;
    let ow = (s[3] + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
    for bn in 0..s[0] {
        for ch in 0..s[1] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let ys = (oy * stride).saturating_sub(pad)..(oy * stride + k - pad).min(s[2]);
                    let m = ys
                        .flat_map(|i| {
                            let xs = (ox * stride).saturating_sub(pad)..(ox * stride + k - pad).min(s[3]);
                            xs.map(move |j| x.data()[idx4(s, bn, ch, i, j)])
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.push(m);
                }
            }
        }
    }
    Tensor::from_vec(&[s[0], s[1], oh, ow], out).unwrap()
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
