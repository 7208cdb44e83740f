//! Tape-based reverse-mode autograd.
//!
//! Every operation appends a node holding its output value and whatever it
//! saved for the backward pass. Creation order is a valid topological order,
//! so [`Graph::backward`] simply walks the tape in reverse, visiting each
//! node once and accumulating input gradients additively.

use crate::error::{config_err, Error, Result};
use crate::kernels::conv::{self, conv_out_extent, ConvGeom};
use crate::kernels::{norm, spatial};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a train-mode batch norm (variance is biased).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cin: usize,
    },
    BilinearUp2(Var),
    NearestUp2(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ChannelMean(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        denom: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulChannel {
        x: Var,
        s: Var,
    },
    MulPixel {
        x: Var,
        m: Var,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        target: Tensor,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`]; present exactly for the nodes
/// that require grad, zero-filled where the loss does not depend on them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(config_err!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Which smooth piece of the network the recorded pass lies on: the
    /// sign of every ReLU input and the winner of every max-pool window.
    /// Two passes with equal patterns differ only through smooth ops.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| usize::from(v > 0.0)),
                ),
                Op::MaxPool { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Zero-padded cross-correlation. `x`: N×Cin×H×W, `w`: Cout×Cin×kh×kw, `b`: Cout.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if cin != wcin {
            return Err(config_err!(
                "conv2d: input {:?} has {cin} channels but weight {:?} expects {wcin}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(config_err!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    self.shape(b)
                ));
            }
        }
        let (oh, ow) = match (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(config_err!(
                    "conv2d: kernel {kh}×{kw} (stride {stride}, pad {pad}) does not fit input {:?}",
                    self.shape(x)
                ))
            }
        };
        let geom = ConvGeom {
            channels: cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let out = conv::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(&[n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
            },
            &inputs,
        ))
    }

    /// Transposed convolution with weight Cin×Cout×kh×kw; output extents are
    /// `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [wcin, cout, kh, kw] = self.value(w).dims4()?;
        if cin != wcin {
            return Err(config_err!(
                "conv_transpose2d: input {:?} has {cin} channels but weight {:?} expects {wcin}",
                self.shape(x),
                self.shape(w)
            ));
        }
        let extent = |size: usize, k: usize| ((size - 1) * stride + k).checked_sub(2 * pad);
        let (oh, ow) = match (extent(h, kh), extent(wd, kw)) {
            (Some(oh), Some(ow)) if stride >= 1 && oh >= 1 && ow >= 1 => (oh, ow),
            _ => {
                return Err(config_err!(
                    "conv_transpose2d: kernel {kh}×{kw} (stride {stride}, pad {pad}) gives no output for {:?}",
                    self.shape(x)
                ))
            }
        };
        let geom = ConvGeom {
            channels: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        debug_assert_eq!(conv_out_extent(oh, kh, stride, pad), Some(h));
        let out =
            conv::conv_transpose2d_forward(self.value(x).data(), n, self.value(w).data(), cin, &geom);
        let value = Tensor::from_vec(&[n, cout, oh, ow], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, geom, cin }, &[x, w]))
    }

    /// ×2 bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_up2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let out = spatial::bilinear_up2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::BilinearUp2(x), &[x]))
    }

    /// ×2 nearest-neighbour resize (each output copies its floor-mapped source).
    pub fn nearest_up2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let out = spatial::nearest_up2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::NearestUp2(x), &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if pad >= k {
            return Err(config_err!("max_pool2d: pad {pad} must be smaller than kernel {k}"));
        }
        let (oh, ow) = conv_out_extent(h, k, stride, pad)
            .zip(conv_out_extent(w, k, stride, pad))
            .ok_or_else(|| config_err!("max_pool2d: window {k} does not fit {:?}", self.shape(x)))?;
        let (out, argmax) =
            spatial::max_pool_forward(self.value(x).data(), n * c, h, w, k, stride, pad, oh, ow);
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// N×C×H×W → N×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let out = spatial::global_avg_pool(self.value(x).data(), n * c, h * w);
        let value = Tensor::from_vec(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// N×C×H×W → N×1×H×W mean over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let out = spatial::channel_mean(self.value(x).data(), n, c, h * w);
        let value = Tensor::from_vec(&[n, 1, h, w], out)?;
        Ok(self.push(value, Op::ChannelMean(x), &[x]))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        let (n, c, plane) = match shape {
            [n, c] => (*n, *c, 1),
            [n, c, h, w] => (*n, *c, h * w),
            _ => return Err(config_err!("batch_norm: unsupported input shape {shape:?}")),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(config_err!(
                "batch_norm: affine shapes {:?}/{:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok((n, c, plane))
    }

    /// Normalizes with the batch's own per-channel statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, plane) = self.bn_dims(x, gamma, beta)?;
        let (mean, var) = norm::channel_stats(self.value(x).data(), n, c, plane);
        let denom: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
        let (y, xhat) = norm::normalize(
            self.value(x).data(),
            n,
            c,
            plane,
            &mean,
            &denom,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::from_vec(self.shape(x), y)?;
        let stats = BatchStats {
            mean,
            var,
            count: n * plane,
        };
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                denom,
                train: true,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Normalizes with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, plane) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(config_err!(
                "batch_norm: running statistics do not match {c} channels"
            ));
        }
        let denom: Vec<f64> = running_var.iter().map(|v| (v + eps).sqrt()).collect();
        let (y, xhat) = norm::normalize(
            self.value(x).data(),
            n,
            c,
            plane,
            running_mean,
            &denom,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::from_vec(self.shape(x), y)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                denom,
                train: false,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// `x·wᵀ + b` with `x`: N×D, `w`: K×D, `b`: K.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [n, d] = self.value(x).dims2()?;
        let [k, wd] = self.value(w).dims2()?;
        if d != wd {
            return Err(config_err!(
                "linear: input {:?} does not match weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(config_err!("linear: bias {:?} does not match {k} outputs", self.shape(b)));
            }
        }
        let mut out = vec![0.0; n * k];
        crate::kernels::gemm::gemm(n, d, k, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::from_vec(&[n, k], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        self.push(value, Op::Scale(x, k), &[x])
    }

    /// Per-channel scaling: `x` N×C×H×W times `s` N×C broadcast over pixels.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(s) != [n, c] {
            return Err(config_err!(
                "mul_channel: scale {:?} is not broadcastable against {:?}",
                self.shape(s),
                self.shape(x)
            ));
        }
        let plane = h * w;
        let sv = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (p, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sv[p]);
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::MulChannel { x, s }, &[x, s]))
    }

    /// Per-pixel scaling: `x` N×C×H×W times `m` N×1×H×W broadcast over channels.
    pub fn mul_pixel(&mut self, x: Var, m: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.shape(m) != [n, 1, h, w] {
            return Err(config_err!(
                "mul_pixel: map {:?} is not broadcastable against {:?}",
                self.shape(m),
                self.shape(x)
            ));
        }
        let plane = h * w;
        let mv = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for (p, chunk) in out.chunks_mut(plane).enumerate() {
            let map = &mv[(p / c) * plane..(p / c + 1) * plane];
            chunk.iter_mut().zip(map).for_each(|(v, m)| *v *= m);
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::MulPixel { x, m }, &[x, m]))
    }

    /// Concatenates along axis 1; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| config_err!("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if base.len() < 2 {
            return Err(config_err!("concat: inputs need rank ≥ 2, got {base:?}"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(config_err!("concat: shape {s:?} incompatible with {base:?}"));
            }
            widths.push(s[1]);
        }
        let outer = base[0];
        let inner: usize = base[2..].iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for n in 0..outer {
            for (p, &wid) in parts.iter().zip(&widths) {
                let d = self.value(*p).data();
                out.extend_from_slice(&d[n * wid * inner..(n + 1) * wid * inner]);
            }
        }
        let mut shape = base;
        shape[1] = total;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        ))
    }

    /// Slice `[start, start+len)` of axis 1.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || len == 0 || start + len > shape[1] {
            return Err(config_err!(
                "narrow: range {start}..{} out of bounds for {shape:?}",
                start + len
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let width = shape[1];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for n in 0..shape[0] {
            let base = (n * width + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[1] = len;
        let value = Tensor::from_vec(&oshape, out)?;
        Ok(self.push(value, Op::Narrow { x, start, len }, &[x]))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    /// Mean soft-target cross-entropy: `−(1/N) Σ_n Σ_k t_nk · log softmax(z_n)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let [n, k] = self.value(logits).dims2()?;
        if target.shape() != [n, k] {
            return Err(config_err!(
                "softmax_cross_entropy: target {:?} does not match logits {:?}",
                target.shape(),
                self.shape(logits)
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[i * k + j] = logp.exp();
                loss -= target.data()[i * k + j] * logp;
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                target: target.clone(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Tensor::from_vec(node.value.shape(), data).expect("gradient shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cout,
            } => {
                let n = self.shape(*x)[0];
                if needs(*x) {
                    let dx = conv::conv2d_backward_input(g, n, self.value(*w).data(), *cout, geom);
                    acc(*x, dx);
                }
                if needs(*w) {
                    let dw = conv::conv2d_backward_weight(g, self.value(*x).data(), n, *cout, geom);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, conv::bias_grad(g, n, *cout, geom.col_cols()));
                }
            }
            Op::ConvTranspose2d { x, w, geom, cin } => {
                let n = self.shape(*x)[0];
                if needs(*x) {
                    let dx = conv::conv_transpose2d_backward_input(
                        g,
                        n,
                        self.value(*w).data(),
                        *cin,
                        geom,
                    );
                    acc(*x, dx);
                }
                if needs(*w) {
                    let dw = conv::conv_transpose2d_backward_weight(
                        g,
                        self.value(*x).data(),
                        n,
                        *cin,
                        geom,
                    );
                    acc(*w, dw);
                }
            }
            Op::BilinearUp2(x) => {
                let [n, c, h, w] = self.value(*x).dims4().expect("rank 4");
                acc(*x, spatial::bilinear_up2_backward(g, n * c, h, w));
            }
            Op::NearestUp2(x) => {
                let [n, c, h, w] = self.value(*x).dims4().expect("rank 4");
                acc(*x, spatial::nearest_up2_backward(g, n * c, h, w));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (gv, &at) in g.iter().zip(argmax) {
                    dx[at] += gv;
                }
                acc(*x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let [_, _, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let dx = g
                    .iter()
                    .flat_map(|gv| std::iter::repeat_n(gv * inv, plane))
                    .collect();
                acc(*x, dx);
            }
            Op::ChannelMean(x) => {
                let [n, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let inv = 1.0 / c as f64;
                let mut dx = Vec::with_capacity(n * c * plane);
                for b in 0..n {
                    let src = &g[b * plane..(b + 1) * plane];
                    for _ in 0..c {
                        dx.extend(src.iter().map(|v| v * inv));
                    }
                }
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                denom,
                train,
            } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let plane = shape[2..].iter().product::<usize>();
                let gam = self.value(*gamma).data();
                if *train {
                    let (dx, dg, db) =
                        norm::batch_norm_train_backward(g, xhat, n, c, plane, gam, denom);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                } else {
                    let mut dx = vec![0.0; g.len()];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                dx[i] = g[i] * gam[ch] / denom[ch];
                                dg[ch] += g[i] * xhat[i];
                                db[ch] += g[i];
                            }
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let [n, d] = self.value(*x).dims2().expect("rank 2");
                let k = self.shape(*w)[0];
                if needs(*x) {
                    let mut dx = vec![0.0; n * d];
                    crate::kernels::gemm::gemm(n, k, d, g, false, self.value(*w).data(), false, 0.0, &mut dx);
                    acc(*x, dx);
                }
                if needs(*w) {
                    let mut dw = vec![0.0; k * d];
                    crate::kernels::gemm::gemm(k, n, d, g, true, self.value(*x).data(), false, 0.0, &mut dw);
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; k];
                    for row in g.chunks(k) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if needs(*a) {
                    acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(x, k) => acc(*x, g.iter().map(|v| v * k).collect()),
            Op::MulChannel { x, s } => {
                let [_, _, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                if needs(*x) {
                    let mut dx = g.to_vec();
                    for (p, chunk) in dx.chunks_mut(plane).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= sv[p]);
                    }
                    acc(*x, dx);
                }
                if needs(*s) {
                    let ds = g
                        .chunks(plane)
                        .zip(xv.chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*s, ds);
                }
            }
            Op::MulPixel { x, m } => {
                let [n, c, h, w] = self.value(*x).dims4().expect("rank 4");
                let plane = h * w;
                let mv = self.value(*m).data();
                let xv = self.value(*x).data();
                if needs(*x) {
                    let mut dx = g.to_vec();
                    for (p, chunk) in dx.chunks_mut(plane).enumerate() {
                        let map = &mv[(p / c) * plane..(p / c + 1) * plane];
                        chunk.iter_mut().zip(map).for_each(|(v, m)| *v *= m);
                    }
                    acc(*x, dx);
                }
                if needs(*m) {
                    let mut dm = vec![0.0; n * plane];
                    for (p, (gc, xc)) in g.chunks(plane).zip(xv.chunks(plane)).enumerate() {
                        let dst = &mut dm[(p / c) * plane..(p / c + 1) * plane];
                        for ((d, a), b) in dst.iter_mut().zip(gc).zip(xc) {
                            *d += a * b;
                        }
                    }
                    acc(*m, dm);
                }
            }
            Op::Concat { parts, widths } => {
                let shape = node.value.shape();
                let outer = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1];
                let mut offset = 0;
                for (p, &wid) in parts.iter().zip(widths) {
                    if needs(*p) {
                        let mut d = Vec::with_capacity(outer * wid * inner);
                        for n in 0..outer {
                            let base = (n * total + offset) * inner;
                            d.extend_from_slice(&g[base..base + wid * inner]);
                        }
                        acc(*p, d);
                    }
                    offset += wid;
                }
            }
            Op::Narrow { x, start, len } => {
                let shape = self.shape(*x);
                let inner: usize = shape[2..].iter().product();
                let width = shape[1];
                let mut dx = vec![0.0; self.value(*x).numel()];
                for n in 0..shape[0] {
                    let base = (n * width + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[n * len * inner..(n + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let [n, k] = self.value(*logits).dims2().expect("rank 2");
                let t = target.data();
                let mut dz = vec![0.0; n * k];
                for i in 0..n {
                    let mass: f64 = t[i * k..(i + 1) * k].iter().sum();
                    for j in 0..k {
                        dz[i * k + j] = g[0] * (probs[i * k + j] * mass - t[i * k + j]) / n as f64;
                    }
                }
                acc(*logits, dz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sigmoid_sum_derivative_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 3]));
        let s = g.sigmoid(x);
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
        let l = g.sum(s);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn relu_of_negative_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![-1.0, -0.5, -7.0]).unwrap());
        let y = g.relu(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        let unused = g.param(Tensor::ones(&[3]));
        let c = g.constant(Tensor::ones(&[4]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0);
        let b = g.scale(x, 4.0);
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 5, 1, 1]));
        let err = g.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 4, 4]") && err.contains("[2, 5, 1, 1]"), "{err}");
    }

    #[test]
    fn mul_channel_rejects_bad_broadcast() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let s = g.constant(Tensor::zeros(&[1, 2]));
        assert!(g.mul_channel(x, s).is_err());
        let m = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.mul_pixel(x, m).is_err());
    }

    #[test]
    fn cross_entropy_vanishes_for_peaked_logits() {
        let target = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let mut prev = f64::INFINITY;
        for peak in [1.0, 5.0, 10.0, 20.0, 40.0] {
            let mut g = Graph::new();
            let z = g.constant(Tensor::from_vec(&[1, 3], vec![0.0, peak, 0.0]).unwrap());
            let l = g.softmax_cross_entropy(z, &target).unwrap();
            let loss = g.value(l).item();
            // log-sum-exp oracle: ln(e^peak + 2) − peak
            let oracle = (peak.exp() + 2.0).ln() - peak;
            assert!((loss - oracle).abs() < 1e-12);
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-15);
    }
}
