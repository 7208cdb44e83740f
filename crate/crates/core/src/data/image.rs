//! Image records and the geometric transforms used by augmentation.
//!
//! On disk an image is a TNSR record of shape H×W×3 with values in [0, 1];
//! in memory it is a 3×H×W tensor.

use std::path::Path;

use cafpn_tensor::archive::{self, DType};
use cafpn_tensor::Tensor;

use crate::error::{Error, Result};

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let t = archive::load_tensor(path)?;
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Data(format!(
            "{}: expected an H×W×3 image record, got shape {s:?}",
            path.display()
        )));
    }
    Ok(hwc_to_chw(&t))
}

pub fn save_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    archive::save_tensor(path, &chw_to_hwc(img), DType::F32)?;
    Ok(())
}

pub fn hwc_to_chw(t: &Tensor) -> Tensor {
    let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = t.data()[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out).expect("same element count")
}

pub fn chw_to_hwc(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = t.data()[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out).expect("same element count")
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    (img.shape()[0], img.shape()[1], img.shape()[2])
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (c, h, w) = dims(img);
    let mut out = img.clone();
    for ch in 0..c {
        for y in 0..h {
            let row = &mut out.data_mut()[(ch * h + y) * w..(ch * h + y + 1) * w];
            row.reverse();
        }
    }
    out
}

/// Window `[y0, y0+ch) × [x0, x0+cw)`; the window must lie inside the image.
pub fn crop(img: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let (c, h, w) = dims(img);
    assert!(y0 + ch <= h && x0 + cw <= w, "crop window outside the image");
    let mut out = Vec::with_capacity(c * ch * cw);
    for k in 0..c {
        for y in y0..y0 + ch {
            let base = (k * h + y) * w;
            out.extend_from_slice(&img.data()[base + x0..base + x0 + cw]);
        }
    }
    Tensor::from_vec(&[c, ch, cw], out).expect("crop extents")
}

pub fn center_crop(img: &Tensor, size: usize) -> Tensor {
    let (_, h, w) = dims(img);
    crop(img, (h - size) / 2, (w - size) / 2, size, size)
}

pub fn zero_pad(img: &Tensor, pad: usize) -> Tensor {
    let (c, h, w) = dims(img);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * ph * pw];
    for k in 0..c {
        for y in 0..h {
            let src = (k * h + y) * w;
            let dst = (k * ph + y + pad) * pw + pad;
            out[dst..dst + w].copy_from_slice(&img.data()[src..src + w]);
        }
    }
    Tensor::from_vec(&[c, ph, pw], out).expect("padded extents")
}

/// Bilinear resampling to `oh × ow` with half-pixel centers and edge clamp.
pub fn resize(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = dims(img);
    let taps = |dst: usize, src_len: usize, dst_len: usize| {
        let scale = src_len as f64 / dst_len as f64;
        let f = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = f.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, f - lo as f64)
    };
    let ys: Vec<_> = (0..oh).map(|y| taps(y, h, oh)).collect();
    let xs: Vec<_> = (0..ow).map(|x| taps(x, w, ow)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        let plane = &img.data()[k * h * w..(k + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
                let bot = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).expect("resized extents")
}

/// Resizes so the shorter side equals `short`, keeping the aspect ratio.
pub fn resize_shorter(img: &Tensor, short: usize) -> Tensor {
    let (_, h, w) = dims(img);
    if h.min(w) == short {
        return img.clone();
    }
    let (oh, ow) = if h <= w {
        (short, ((w * short) as f64 / h as f64).round() as usize)
    } else {
        (((h * short) as f64 / w as f64).round() as usize, short)
    };
    resize(img, oh, ow)
}

/// Rec. 601 luma of an RGB image, H×W row-major.
pub fn luminance(img: &Tensor) -> Vec<f64> {
    let (_, h, w) = dims(img);
    let p = h * w;
    let d = img.data();
    (0..p)
        .map(|i| 0.299 * d[i] + 0.587 * d[p + i] + 0.114 * d[2 * p + i])
        .collect()
}
