//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and returns gradients for all nodes that depend on a
//! leaf created with `requires_grad`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize, stride: usize },
    Upsample { x: Var, factor: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    ChannelNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Add { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    SelectChannel { x: Var, c: usize },
    PadLen { x: Var, left: usize },
    CropLen { x: Var, start: usize },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    WeightedSum { x: Var, r: Vec<f64> },
    Bce { p: Var, y: Vec<f64> },
    Focal { p: Var, y: Vec<f64>, gamma: f64 },
    Dice { p: Var, y: Vec<f64>, smooth: f64 },
    FaultyIdentity { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by variable.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, l] => Ok((b, c, l)),
        ref s => Err(shape_err(format!("{what} expects [batch, channels, length], got {s:?}"))),
    }
}

fn clamp_p(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, false)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, false)
    } else {
        (p, true)
    }
}

/// Unfolds one `[c_in, len]` sample into `[c_in * k, l_out]` columns.
fn im2col(x: &[f64], c_in: usize, len: usize, k: usize, stride: usize, pad: usize, l_out: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * k * l_out];
    for ci in 0..c_in {
        let row = &x[ci * len..(ci + 1) * len];
        for j in 0..k {
            let dst = &mut cols[(ci * k + j) * l_out..(ci * k + j + 1) * l_out];
            for (t, d) in dst.iter_mut().enumerate() {
                let src = (t * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < len {
                    *d = row[src as usize];
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], dx: &mut [f64], c_in: usize, len: usize, k: usize, stride: usize, pad: usize, l_out: usize) {
    for ci in 0..c_in {
        for j in 0..k {
            let src = &cols[(ci * k + j) * l_out..(ci * k + j + 1) * l_out];
            for (t, &v) in src.iter().enumerate() {
                let i = (t * stride + j) as isize - pad as isize;
                if i >= 0 && (i as usize) < len {
                    dx[ci * len + i as usize] += v;
                }
            }
        }
    }
}

/// `c[m, n] += a[m, k] @ b[k, n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: every slice covers the index range implied by its dims and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Cross-correlation of `x [B, C_in, L]` with `w [C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bs, c_in, len) = dims3(self.value(x), "conv1d input")?;
        let (c_out, wc, k) = dims3(self.value(w), "conv1d weight")?;
        if wc != c_in {
            return Err(shape_err(format!("conv1d: weight expects {wc} input channels, input has {c_in}")));
        }
        if stride == 0 || len + 2 * pad < k {
            return Err(shape_err(format!("conv1d: kernel {k} does not fit length {len} with padding {pad}")));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(shape_err(format!("conv1d: bias must have shape [{c_out}]")));
            }
        }
        let l_out = (len + 2 * pad - k) / stride + 1;
        let kk = c_in * k;
        let mut out = vec![0.0; bs * c_out * l_out];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            for s in 0..bs {
                let cols = im2col(&xd[s * c_in * len..(s + 1) * c_in * len], c_in, len, k, stride, pad, l_out);
                let o = &mut out[s * c_out * l_out..(s + 1) * c_out * l_out];
                gemm_acc(c_out, kk, l_out, wd, kk, 1, &cols, l_out, 1, o);
            }
            if let Some(b) = b {
                let bd = self.value(b).data();
                for s in 0..bs {
                    for co in 0..c_out {
                        let row = &mut out[(s * c_out + co) * l_out..(s * c_out + co + 1) * l_out];
                        row.iter_mut().for_each(|v| *v += bd[co]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![bs, c_out, l_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv1d { x, w, b, stride, pad }, &inputs))
    }

    pub fn maxpool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x), "maxpool1d")?;
        if k == 0 || stride == 0 || k > len {
            return Err(shape_err(format!("maxpool1d: window {k} does not fit length {len}")));
        }
        let l_out = (len - k) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * l_out);
        let mut argmax = Vec::with_capacity(bs * c * l_out);
        for row in 0..bs * c {
            let base = row * len;
            for t in 0..l_out {
                let start = base + t * stride;
                let mut best = start;
                for i in start + 1..start + k {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let value = Tensor::new(vec![bs, c, l_out], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avgpool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x), "avgpool1d")?;
        if k == 0 || stride == 0 || k > len {
            return Err(shape_err(format!("avgpool1d: window {k} does not fit length {len}")));
        }
        let l_out = (len - k) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * l_out);
        for row in 0..bs * c {
            for t in 0..l_out {
                let s = row * len + t * stride;
                out.push(xd[s..s + k].iter().sum::<f64>() / k as f64);
            }
        }
        let value = Tensor::new(vec![bs, c, l_out], out)?;
        Ok(self.push(value, Op::AvgPool { x, k, stride }, &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x), "upsample_nearest")?;
        if factor == 0 {
            return Err(shape_err("upsample factor must be positive".into()));
        }
        let xd = self.value(x).data();
        let out: Vec<f64> = xd.iter().flat_map(|&v| std::iter::repeat_n(v, factor)).collect();
        let value = Tensor::new(vec![bs, c, len * factor], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect()).expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| sigmoid(a)).collect()).expect("same shape");
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    /// Standardizes every (sample, channel) row over the length axis, then
    /// applies the per-channel affine `gamma * xhat + beta`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x), "channel_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!("channel_norm: gamma and beta must have shape [{c}]")));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; bs * c];
        let mut out = vec![0.0; xd.len()];
        for row in 0..bs * c {
            let ch = row % c;
            let r = &xd[row * len..(row + 1) * len];
            let mean = r.iter().sum::<f64>() / len as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[row] = inv;
            for i in 0..len {
                let h = (r[i] - mean) * inv;
                xhat[row * len + i] = h;
                out[row * len + i] = gd[ch] * h + bd[ch];
            }
        }
        let value = Tensor::new(vec![bs, c, len], out)?;
        Ok(self.push(value, Op::ChannelNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect()).expect("same shape");
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// Element-wise mean of equally shaped tensors.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| shape_err("mean_of needs at least one input".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(if xs.len() == 1 { acc } else { self.scale(acc, 1.0 / xs.len() as f64) })
    }

    /// `[B, C, L] -> [B, 1, L]`.
    pub fn select_channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let (bs, nc, len) = dims3(self.value(x), "select_channel")?;
        if c >= nc {
            return Err(shape_err(format!("select_channel: channel {c} of {nc}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bs * len);
        for s in 0..bs {
            out.extend_from_slice(&xd[(s * nc + c) * len..(s * nc + c + 1) * len]);
        }
        let value = Tensor::new(vec![bs, 1, len], out)?;
        Ok(self.push(value, Op::SelectChannel { x, c }, &[x]))
    }

    /// Zero-pads the length axis.
    pub fn pad_len(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x), "pad_len")?;
        let new_len = left + len + right;
        let xd = self.value(x).data();
        let mut out = vec![0.0; bs * c * new_len];
        for row in 0..bs * c {
            out[row * new_len + left..row * new_len + left + len].copy_from_slice(&xd[row * len..(row + 1) * len]);
        }
        let value = Tensor::new(vec![bs, c, new_len], out)?;
        Ok(self.push(value, Op::PadLen { x, left }, &[x]))
    }

    /// Keeps `len` samples starting at `start` along the length axis.
    pub fn crop_len(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (bs, c, old) = dims3(self.value(x), "crop_len")?;
        if start + len > old {
            return Err(shape_err(format!("crop_len: {start}+{len} exceeds length {old}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bs * c * len);
        for row in 0..bs * c {
            out.extend_from_slice(&xd[row * old + start..row * old + start + len]);
        }
        let value = Tensor::new(vec![bs, c, len], out)?;
        Ok(self.push(value, Op::CropLen { x, start }, &[x]))
    }

    /// `[B, C, L] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (bs, c, len) = dims3(self.value(x), "global_avg_pool")?;
        let xd = self.value(x).data();
        let out = (0..bs * c).map(|row| xd[row * len..(row + 1) * len].iter().sum::<f64>() / len as f64).collect();
        let value = Tensor::new(vec![bs, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// `x [B, in] @ w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, n_in) = match *self.value(x).shape() {
            [b, i] => (b, i),
            ref s => return Err(shape_err(format!("linear input must be [batch, features], got {s:?}"))),
        };
        let n_out = match *self.value(w).shape() {
            [o, i] if i == n_in => o,
            ref s => return Err(shape_err(format!("linear weight {s:?} does not take {n_in} inputs"))),
        };
        if self.value(b).shape() != [n_out] {
            return Err(shape_err(format!("linear bias must have shape [{n_out}]")));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bs * n_out];
        for s in 0..bs {
            let xr = &xd[s * n_in..(s + 1) * n_in];
            for o in 0..n_out {
                let wr = &wd[o * n_in..(o + 1) * n_in];
                out[s * n_out + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![bs, n_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// `sum(x * r)` for a constant `r`; a scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, r: &[f64]) -> Result<Var> {
        let v = self.value(x);
        if v.len() != r.len() {
            return Err(shape_err(format!("weighted_sum: {} weights for {} values", r.len(), v.len())));
        }
        let s = v.data().iter().zip(r).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, r: r.to_vec() }, &[x]))
    }

    fn check_target(&self, p: Var, y: &Tensor, what: &str) -> Result<()> {
        if self.value(p).shape() != y.shape() {
            return Err(shape_err(format!("{what}: prediction {:?} vs target {:?}", self.value(p).shape(), y.shape())));
        }
        if self.value(p).is_empty() {
            return Err(shape_err(format!("{what}: empty input")));
        }
        Ok(())
    }

    pub fn bce_loss(&mut self, p: Var, y: &Tensor) -> Result<Var> {
        self.check_target(p, y, "bce_loss")?;
        let pd = self.value(p).data();
        let n = pd.len() as f64;
        let s: f64 = pd
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                let (pc, _) = clamp_p(p);
                y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()
            })
            .sum();
        let value = Tensor::scalar(-s / n);
        Ok(self.push(value, Op::Bce { p, y: y.data().to_vec() }, &[p]))
    }

    pub fn focal_loss(&mut self, p: Var, y: &Tensor, gamma: f64) -> Result<Var> {
        self.check_target(p, y, "focal_loss")?;
        if !(gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be non-negative, got {gamma}")));
        }
        let pd = self.value(p).data();
        let n = pd.len() as f64;
        let s: f64 = pd
            .iter()
            .zip(y.data())
            .map(|(&p, &y)| {
                let (pc, _) = clamp_p(p);
                y * (1.0 - pc).powf(gamma) * pc.ln() + (1.0 - y) * pc.powf(gamma) * (1.0 - pc).ln()
            })
            .sum();
        let value = Tensor::scalar(-s / n);
        Ok(self.push(value, Op::Focal { p, y: y.data().to_vec(), gamma }, &[p]))
    }

    /// `1 - (2 sum(p y) + smooth) / (sum p + sum y + smooth)` over the whole tensor.
    pub fn dice_loss(&mut self, p: Var, y: &Tensor, smooth: f64) -> Result<Var> {
        self.check_target(p, y, "dice_loss")?;
        if !(smooth >= 0.0) {
            return Err(Error::Config(format!("dice smooth must be non-negative, got {smooth}")));
        }
        let pd = self.value(p).data();
        let inter: f64 = pd.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let total: f64 = pd.iter().sum::<f64>() + y.data().iter().sum::<f64>();
        let value = Tensor::scalar(1.0 - (2.0 * inter + smooth) / (total + smooth));
        Ok(self.push(value, Op::Dice { p, y: y.data().to_vec(), smooth }, &[p]))
    }

    /// Identity whose backward doubles the gradient. Exists so gradient
    /// checking can be shown to catch a wrong backward.
    #[doc(hidden)]
    pub fn faulty_identity(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::FaultyIdentity { x }, &[x])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
        }
        Grads { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backward_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv1d { x, w, b, stride, pad } => {
                let (bs, c_in, len) = dims3(self.value(x), "").expect("checked in forward");
                let (c_out, _, k) = dims3(self.value(w), "").expect("checked in forward");
                let l_out = node.value.shape()[2];
                let kk = c_in * k;
                let xd = self.value(x).data();
                let wd = self.value(w).data();
                let need_x = self.nodes[x.0].needs_grad;
                let need_w = self.nodes[w.0].needs_grad;
                let mut dw = vec![0.0; c_out * kk];
                let mut dx = if need_x { vec![0.0; xd.len()] } else { Vec::new() };
                for s in 0..bs {
                    let go = &gy[s * c_out * l_out..(s + 1) * c_out * l_out];
                    if need_w {
                        let cols = im2col(&xd[s * c_in * len..(s + 1) * c_in * len], c_in, len, k, stride, pad, l_out);
                        // dW[c_out, kk] += dOut[c_out, l_out] @ cols^T
                        gemm_acc(c_out, l_out, kk, go, l_out, 1, &cols, 1, l_out, &mut dw);
                    }
                    if need_x {
                        let mut dcols = vec![0.0; kk * l_out];
                        // dCols[kk, l_out] = W^T @ dOut
                        gemm_acc(kk, c_out, l_out, wd, 1, kk, go, l_out, 1, &mut dcols);
                        col2im_add(&dcols, &mut dx[s * c_in * len..(s + 1) * c_in * len], c_in, len, k, stride, pad, l_out);
                    }
                }
                if let Some(g) = self.acc(grads, w) {
                    g.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                }
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
                if let Some(b) = b {
                    if let Some(g) = self.acc(grads, b) {
                        for s in 0..bs {
                            for co in 0..c_out {
                                g[co] += gy[(s * c_out + co) * l_out..(s * c_out + co + 1) * l_out].iter().sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(g) = self.acc(grads, *x) {
                    for (&i, &d) in argmax.iter().zip(gy) {
                        g[i] += d;
                    }
                }
            }
            &Op::AvgPool { x, k, stride } => {
                let len = self.value(x).shape()[2];
                let l_out = node.value.shape()[2];
                if let Some(g) = self.acc(grads, x) {
                    for (o, &d) in gy.iter().enumerate() {
                        let (row, t) = (o / l_out, o % l_out);
                        let s = row * len + t * stride;
                        g[s..s + k].iter_mut().for_each(|v| *v += d / k as f64);
                    }
                }
            }
            &Op::Upsample { x, factor } => {
                if let Some(g) = self.acc(grads, x) {
                    for (i, v) in g.iter_mut().enumerate() {
                        *v += gy[i * factor..(i + 1) * factor].iter().sum::<f64>();
                    }
                }
            }
            &Op::Relu { x } => {
                let xd = self.value(x).data();
                if let Some(g) = self.acc(grads, x) {
                    for ((v, &a), &d) in g.iter_mut().zip(xd).zip(gy) {
                        if a > 0.0 {
                            *v += d;
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                let yd = node.value.data();
                if let Some(g) = self.acc(grads, x) {
                    for ((v, &s), &d) in g.iter_mut().zip(yd).zip(gy) {
                        *v += d * s * (1.0 - s);
                    }
                }
            }
            Op::ChannelNorm { x, gamma, beta, xhat, inv_std } => {
                let (bs, c, len) = dims3(&node.value, "").expect("checked in forward");
                let gd = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; bs * c * len];
                for row in 0..bs * c {
                    let ch = row % c;
                    let r = row * len..(row + 1) * len;
                    let (gr, hr) = (&gy[r.clone()], &xhat[r.clone()]);
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for i in 0..len {
                        dgamma[ch] += gr[i] * hr[i];
                        dbeta[ch] += gr[i];
                        let dh = gr[i] * gd[ch];
                        sum_d += dh;
                        sum_dh += dh * hr[i];
                    }
                    let inv = inv_std[row];
                    let n = len as f64;
                    for i in 0..len {
                        let dh = gr[i] * gd[ch];
                        dx[row * len + i] = inv / n * (n * dh - sum_d - hr[i] * sum_dh);
                    }
                }
                for (v, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(a, b)| *a += c * b);
                }
            }
            &Op::SelectChannel { x, c } => {
                let (bs, nc, len) = dims3(self.value(x), "").expect("checked in forward");
                if let Some(g) = self.acc(grads, x) {
                    for s in 0..bs {
                        let dst = &mut g[(s * nc + c) * len..(s * nc + c + 1) * len];
                        dst.iter_mut().zip(&gy[s * len..(s + 1) * len]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::PadLen { x, left } => {
                let len = self.value(x).shape()[2];
                let new_len = node.value.shape()[2];
                if let Some(g) = self.acc(grads, x) {
                    for (row, dst) in g.chunks_mut(len).enumerate() {
                        let src = &gy[row * new_len + left..row * new_len + left + len];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::CropLen { x, start } => {
                let old = self.value(x).shape()[2];
                let len = node.value.shape()[2];
                if let (Some(g), true) = (self.acc(grads, x), len > 0) {
                    for (row, src) in gy.chunks(len).enumerate() {
                        let dst = &mut g[row * old + start..row * old + start + len];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::GlobalAvgPool { x } => {
                let len = self.value(x).shape()[2];
                if let Some(g) = self.acc(grads, x) {
                    for (row, &d) in gy.iter().enumerate() {
                        g[row * len..(row + 1) * len].iter_mut().for_each(|v| *v += d / len as f64);
                    }
                }
            }
            &Op::Linear { x, w, b } => {
                let (bs, n_in) = (self.value(x).shape()[0], self.value(x).shape()[1]);
                let n_out = self.value(w).shape()[0];
                let (xd, wd) = (self.value(x).data(), self.value(w).data());
                if let Some(g) = self.acc(grads, x) {
                    for s in 0..bs {
                        for o in 0..n_out {
                            let d = gy[s * n_out + o];
                            for i in 0..n_in {
                                g[s * n_in + i] += d * wd[o * n_in + i];
                            }
                        }
                    }
                }
                if let Some(g) = self.acc(grads, w) {
                    for s in 0..bs {
                        for o in 0..n_out {
                            let d = gy[s * n_out + o];
                            for i in 0..n_in {
                                g[o * n_in + i] += d * xd[s * n_in + i];
                            }
                        }
                    }
                }
                if let Some(g) = self.acc(grads, b) {
                    for s in 0..bs {
                        for o in 0..n_out {
                            g[o] += gy[s * n_out + o];
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                }
            }
            Op::WeightedSum { x, r } => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(r).for_each(|(a, b)| *a += gy[0] * b);
                }
            }
            Op::Bce { p, y } => {
                let pd = self.value(*p).data();
                let n = pd.len() as f64;
                if let Some(g) = self.acc(grads, *p) {
                    for ((v, &p), &y) in g.iter_mut().zip(pd).zip(y) {
                        let (pc, inside) = clamp_p(p);
                        if inside {
                            *v += -gy[0] * (y / pc - (1.0 - y) / (1.0 - pc)) / n;
                        }
                    }
                }
            }
            Op::Focal { p, y, gamma } => {
                let pd = self.value(*p).data();
                let n = pd.len() as f64;
                let gm = *gamma;
                if let Some(g) = self.acc(grads, *p) {
                    for ((v, &p), &y) in g.iter_mut().zip(pd).zip(y) {
                        let (pc, inside) = clamp_p(p);
                        if !inside {
                            continue;
                        }
                        let q = 1.0 - pc;
                        let d_pos = if gm == 0.0 { 1.0 / pc } else { -gm * q.powf(gm - 1.0) * pc.ln() + q.powf(gm) / pc };
                        let d_neg = if gm == 0.0 { -1.0 / q } else { gm * pc.powf(gm - 1.0) * q.ln() - pc.powf(gm) / q };
                        *v += -gy[0] * (y * d_pos + (1.0 - y) * d_neg) / n;
                    }
                }
            }
            Op::Dice { p, y, smooth } => {
                let pd = self.value(*p).data();
                let inter: f64 = pd.iter().zip(y).map(|(a, b)| a * b).sum();
                let total: f64 = pd.iter().sum::<f64>() + y.iter().sum::<f64>();
                let den = total + smooth;
                let num = 2.0 * inter + smooth;
                if let Some(g) = self.acc(grads, *p) {
                    for (v, &yi) in g.iter_mut().zip(y) {
                        *v += -gy[0] * (2.0 * yi * den - num) / (den * den);
                    }
                }
            }
            &Op::FaultyIdentity { x } => {
                if let Some(g) = self.acc(grads, x) {
                    g.iter_mut().zip(gy).for_each(|(a, b)| *a += 2.0 * b);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_hand_example() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let w = g.input(t(vec![1, 1, 3], vec![1.0, 0.0, -1.0]));
        let y = g.conv1d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn conv_identity_kernel_adds_bias() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 1, 3], vec![1.0, -2.0, 5.0]));
        let w = g.input(t(vec![1, 1, 1], vec![1.0]));
        let b = g.input(t(vec![1], vec![0.5]));
        let y = g.conv1d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -1.5, 5.5]);
    }

    #[test]
    fn conv_output_length() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![2, 3, 10]));
        let w = g.input(Tensor::zeros(vec![4, 3, 3]));
        let y = g.conv1d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 5]);
        let bad = g.input(Tensor::zeros(vec![4, 2, 3]));
        assert!(g.conv1d(x, bad, None, 1, 0).is_err());
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let x = g.input(t(vec![1, 1, 4], vec![1.0, 3.0, 2.0, 5.0]));
        let m = g.maxpool1d(x, 2, 2).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let a = g.avgpool1d(x, 2, 2).unwrap();
        assert_eq!(g.value(a).data(), &[2.0, 3.5]);
        assert!(g.maxpool1d(x, 5, 1).is_err());
        let u = g.input(t(vec![1, 1, 2], vec![1.0, 2.0]));
        let up = g.upsample_nearest(u, 2).unwrap();
        assert_eq!(g.value(up).data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn maxpool_ties_route_to_first() {
        let mut g = Graph::new();
        let x = g.param(t(vec![1, 1, 2], vec![4.0, 4.0]));
        let m = g.maxpool1d(x, 2, 2).unwrap();
        let l = g.weighted_sum(m, &[1.0]).unwrap();
        assert_eq!(g.backward(l).get(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.input(t(vec![2], vec![-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn channel_norm_standardizes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(vec![2, 3, 500], 3.0, &mut rng));
        let gm = g.input(Tensor::filled(vec![3], 1.0));
        let bt = g.input(Tensor::zeros(vec![3]));
        let y = g.channel_norm(x, gm, bt, 1e-5).unwrap();
        for row in g.value(y).data().chunks(500) {
            let mean = row.iter().sum::<f64>() / 500.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 500.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let p = g.input(Tensor::filled(vec![4], 0.5));
        let y = t(vec![4], vec![1.0, 0.0, 1.0, 1.0]);
        let l = g.bce_loss(p, &y).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = g.input(t(vec![2], vec![1.0, 0.0]));
        let d = g.dice_loss(p, &t(vec![2], vec![1.0, 1.0]), 0.0).unwrap();
        assert!((g.value(d).item() - 1.0 / 3.0).abs() < 1e-12);

        let p = g.input(t(vec![3], vec![1.0, 0.0, 1.0]));
        let d = g.dice_loss(p, &t(vec![3], vec![1.0, 0.0, 1.0]), 0.0).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
    }

    #[test]
    fn focal_gamma_zero_is_bce() {
        let mut g = Graph::new();
        let p = g.param(t(vec![4], vec![0.1, 0.7, 0.4, 0.99]));
        let y = t(vec![4], vec![1.0, 0.0, 1.0, 0.0]);
        let b = g.bce_loss(p, &y).unwrap();
        let f = g.focal_loss(p, &y, 0.0).unwrap();
        assert!((g.value(b).item() - g.value(f).item()).abs() < 1e-12);
        let gb = g.backward(b).get(p).unwrap().to_vec();
        let gf = g.backward(f).get(p).unwrap().to_vec();
        for (a, b) in gb.iter().zip(&gf) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_losses_are_finite() {
        let mut g = Graph::new();
        let p = g.param(t(vec![2], vec![0.0, 1.0]));
        let y = t(vec![2], vec![1.0, 0.0]);
        let l = g.bce_loss(p, &y).unwrap();
        assert!(g.value(l).item().is_finite());
        assert!(g.backward(l).get(p).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn loss_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.input(Tensor::filled(vec![3], 0.5));
        assert!(g.bce_loss(p, &Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(3.0));
        let s = g.add(a, b).unwrap();
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[1.0]);
    }
}
