//! Spatial kernels on N×C×H×W buffers: ×2 resizes and pooling.

/// Source taps for one output coordinate of a half-pixel ×2 bilinear resize:
/// `(lo, hi, frac)` so that `out = v[lo] + frac·(v[hi] − v[lo])`.
pub fn bilinear_taps(dst: usize, src_len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let lo = (src.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, src - lo as f64)
}

pub fn bilinear_up2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let ytaps: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h)).collect();
    let xtaps: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w)).collect();
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xtaps.iter().enumerate() {
                let a = src[y0 * w + x0];
                let b = src[y0 * w + x1];
                let c = src[y1 * w + x0];
                let d = src[y1 * w + x1];
                let top = a + lx * (b - a);
                let bot = c + lx * (d - c);
                dst[oy * ow + ox] = top + ly * (bot - top);
            }
        }
    }
    out
}

pub fn bilinear_up2_backward(gout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let ytaps: Vec<_> = (0..oh).map(|y| bilinear_taps(y, h)).collect();
    let xtaps: Vec<_> = (0..ow).map(|x| bilinear_taps(x, w)).collect();
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gout[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in xtaps.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += v * (1.0 - ly) * lx;
                d[y1 * w + x0] += v * ly * (1.0 - lx);
                d[y1 * w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

pub fn nearest_up2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for oy in 0..2 * h {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    out
}

pub fn nearest_up2_backward(gout: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &gout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..2 * h {
            for ox in 0..ow {
                d[(oy / 2) * w + ox / 2] += g[oy * ow + ox];
            }
        }
    }
    dx
}

/// Max pooling with `-inf` padding; returns outputs and flat argmax indices
/// into the input plane (first maximum in scan order wins).
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = iy as usize * w + ix as usize;
                        if src[at] > best || best_at == usize::MAX {
                            best = src[at];
                            best_at = at;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = p * h * w + best_at;
            }
        }
    }
    (out, arg)
}

/// Per-(n, c) spatial mean: N×C×H×W → N×C.
pub fn global_avg_pool(x: &[f64], planes: usize, plane: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

/// Per-pixel mean over channels: N×C×H×W → N×1×H×W.
pub fn channel_mean(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * plane];
    for b in 0..n {
        let dst = &mut out[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let src = &x[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|v| *v /= c as f64);
    }
    out
}
