//! im2col/GEMM convolution and its transpose, batched over the leading axis.

use rayon::prelude::*;

use super::gemm::gemm;

/// Samples per partial weight-gradient sum. Fixed so the reduction order,
/// and therefore every bit of the result, is independent of thread count.
const WGRAD_GROUP: usize = 8;

/// Spatial layout shared by a convolution and the transposed convolution
/// that inverts its geometry: `image` extents relate to `out` extents by
/// `out = (image + 2·pad − k) / stride + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.h * self.w
    }
}

/// `floor((size + 2·pad − k)/stride) + 1`, or `None` if the kernel does not fit.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (stride >= 1 && k >= 1 && k <= padded).then(|| (padded - k) / stride + 1)
}

pub fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into an image (adjoint of [`im2col`]).
pub fn col2im(col: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Sums per-sample weight gradients in fixed groups, then folds groups in order.
fn reduce_weight_grad<F>(batch: usize, len: usize, per_sample: F) -> Vec<f64>
where
    F: Fn(usize, &mut Vec<f64>, &mut [f64]) + Sync,
{
    let groups: Vec<Vec<f64>> = (0..batch.div_ceil(WGRAD_GROUP))
        .into_par_iter()
        .map(|gi| {
            let mut acc = vec![0.0; len];
            let mut scratch = Vec::new();
            for n in gi * WGRAD_GROUP..((gi + 1) * WGRAD_GROUP).min(batch) {
                per_sample(n, &mut scratch, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for g in &groups {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total
}

/// Direct convolution. `x`: N×Cin×H×W, `w`: Cout×Cin×kh×kw; `g` describes the input side.
pub fn conv2d_forward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let out_len = cout * g.col_cols();
    let mut out = vec![0.0; batch * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each_init(
            || vec![0.0; g.col_rows() * g.col_cols()],
            |col, (n, y)| {
                im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], g, col);
                gemm(cout, g.col_rows(), g.col_cols(), w, false, col, false, 0.0, y);
                if let Some(b) = bias {
                    for (co, plane) in y.chunks_mut(g.col_cols()).enumerate() {
                        plane.iter_mut().for_each(|v| *v += b[co]);
                    }
                }
            },
        );
    out
}

pub fn conv2d_backward_input(
    gout: &[f64],
    batch: usize,
    w: &[f64],
    cout: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let out_len = cout * g.col_cols();
    let mut dx = vec![0.0; batch * g.image_len()];
    dx.par_chunks_mut(g.image_len())
        .enumerate()
        .for_each_init(
            || vec![0.0; g.col_rows() * g.col_cols()],
            |col, (n, dxn)| {
                let dy = &gout[n * out_len..(n + 1) * out_len];
                gemm(g.col_rows(), cout, g.col_cols(), w, true, dy, false, 0.0, col);
                col2im(col, g, dxn);
            },
        );
    dx
}

pub fn conv2d_backward_weight(
    gout: &[f64],
    x: &[f64],
    batch: usize,
    cout: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let out_len = cout * g.col_cols();
    reduce_weight_grad(batch, cout * g.col_rows(), |n, col, acc| {
        col.resize(g.col_rows() * g.col_cols(), 0.0);
        im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], g, col);
        let dy = &gout[n * out_len..(n + 1) * out_len];
        gemm(cout, g.col_cols(), g.col_rows(), dy, false, col, true, 1.0, acc);
    })
}

pub fn bias_grad(gout: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for n in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let start = (n * channels + c) * plane;
            *d += gout[start..start + plane].iter().sum::<f64>();
        }
    }
    db
}

/// Transposed convolution. `x`: N×Cin×H×W, `w`: Cin×Cout×kh×kw. Here `g`
/// describes the *output* image (Cout×OH×OW) with `g.oh×g.ow = H×W`.
pub fn conv_transpose2d_forward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    cin: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = cin * g.col_cols();
    let mut out = vec![0.0; batch * g.image_len()];
    out.par_chunks_mut(g.image_len())
        .enumerate()
        .for_each_init(
            || vec![0.0; g.col_rows() * g.col_cols()],
            |col, (n, y)| {
                let xn = &x[n * in_len..(n + 1) * in_len];
                gemm(g.col_rows(), cin, g.col_cols(), w, true, xn, false, 0.0, col);
                col2im(col, g, y);
            },
        );
    out
}

pub fn conv_transpose2d_backward_input(
    gout: &[f64],
    batch: usize,
    w: &[f64],
    cin: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = cin * g.col_cols();
    let mut dx = vec![0.0; batch * in_len];
    dx.par_chunks_mut(in_len)
        .enumerate()
        .for_each_init(
            || vec![0.0; g.col_rows() * g.col_cols()],
            |col, (n, dxn)| {
                im2col(&gout[n * g.image_len()..(n + 1) * g.image_len()], g, col);
                gemm(cin, g.col_rows(), g.col_cols(), w, false, col, false, 0.0, dxn);
            },
        );
    dx
}

pub fn conv_transpose2d_backward_weight(
    gout: &[f64],
    x: &[f64],
    batch: usize,
    cin: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = cin * g.col_cols();
    reduce_weight_grad(batch, cin * g.col_rows(), |n, col, acc| {
        col.resize(g.col_rows() * g.col_cols(), 0.0);
        im2col(&gout[n * g.image_len()..(n + 1) * g.image_len()], g, col);
        let xn = &x[n * in_len..(n + 1) * in_len];
        gemm(cin, g.col_cols(), g.col_rows(), xn, false, col, true, 1.0, acc);
    })
}
