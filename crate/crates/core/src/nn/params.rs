use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn round_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_f32);
    }

    /// Adds every parameter to `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Adds every parameter to `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.input(t.clone())).collect()
    }

    /// Checks that `other` has identical names and shapes.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }
}

/// He-normal initialization for a conv weight `[c_out, c_in, k]`.
pub fn he_conv<R: Rng + ?Sized>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Tensor {
    Tensor::randn(vec![c_out, c_in, k], (2.0 / (c_in * k) as f64).sqrt(), rng)
}

/// Conv + channel norm + ReLU, optionally followed by max pooling.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    w: usize,
    gamma: usize,
    beta: usize,
    kernel: usize,
    pool: usize,
}

pub const NORM_EPS: f64 = 1e-5;

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        pool: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{prefix}.w"), he_conv(c_out, c_in, kernel, rng));
        let gamma = ps.add(format!("{prefix}.gamma"), Tensor::filled(vec![c_out], 1.0));
        let beta = ps.add(format!("{prefix}.beta"), Tensor::zeros(vec![c_out]));
        Self { w, gamma, beta, kernel, pool }
    }

    /// Returns the activation before pooling and the block output.
    pub fn forward_pre_pool(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<(Var, Var)> {
        let h = g.conv1d(x, pv[self.w], None, 1, self.kernel / 2)?;
        let h = g.channel_norm(h, pv[self.gamma], pv[self.beta], NORM_EPS)?;
        let h = g.relu(h);
        let out = if self.pool > 1 { g.maxpool1d(h, self.pool, self.pool)? } else { h };
        Ok((h, out))
    }

    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<Var> {
        Ok(self.forward_pre_pool(g, pv, x)?.1)
    }
}

/// Dense layer `[B, in] -> [B, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let w = ps.add(format!("{prefix}.w"), Tensor::randn(vec![n_out, n_in], (1.0 / n_in as f64).sqrt(), rng));
        let b = ps.add(format!("{prefix}.b"), Tensor::zeros(vec![n_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<Var> {
        g.linear(x, pv[self.w], pv[self.b])
    }
}

/// Pointwise (kernel 1) convolution with bias.
#[derive(Debug, Clone)]
pub struct Pointwise {
    w: usize,
    b: usize,
}

impl Pointwise {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let w = ps.add(format!("{prefix}.w"), Tensor::randn(vec![c_out, c_in, 1], (1.0 / c_in as f64).sqrt(), rng));
        let b = ps.add(format!("{prefix}.b"), Tensor::zeros(vec![c_out]));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<Var> {
        g.conv1d(x, pv[self.w], Some(pv[self.b]), 1, 0)
    }
}
