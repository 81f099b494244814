use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_steps: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.97,
            decay_every: 1000,
            total_steps: 100_000,
            batch_size: 64,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.decay_factor > 0.0) || self.decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("eps, decay_factor, decay_every and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at 0-based `step`.
    pub fn effective_lr(&self, step: usize) -> f64 {
        self.lr * self.decay_factor.powi((step / self.decay_every) as i32)
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update at 0-based `step`.
pub fn adam_step(params: &mut ParamSet, grads: &[Vec<f64>], state: &mut AdamState, step: usize, cfg: &OptimizerConfig) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter tensor");
    let t = (step + 1) as i32;
    let lr = cfg.effective_lr(step);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i).data_mut();
        assert_eq!(p.len(), g.len(), "gradient length for parameter {i}");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn one_param(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("p", Tensor::scalar(v));
        ps
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = one_param(1.0);
        let mut st = AdamState::new(&ps);
        let cfg = OptimizerConfig::default();
        adam_step(&mut ps, &[vec![0.5]], &mut st, 0, &cfg);
        assert!((ps.get(0).item() - (1.0 - 0.001)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = one_param(3.0);
        let mut st = AdamState::new(&ps);
        let cfg = OptimizerConfig::default();
        for s in 0..10 {
            adam_step(&mut ps, &[vec![0.0]], &mut st, s, &cfg);
        }
        assert_eq!(ps.get(0).item(), 3.0);
    }

    #[test]
    fn decay_schedule() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.effective_lr(0), 0.001);
        assert_eq!(cfg.effective_lr(999), 0.001);
        assert!((cfg.effective_lr(2500) - 9.409e-4).abs() < 1e-15);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut ps = one_param(0.2);
            let mut st = AdamState::new(&ps);
            for s in 0..5 {
                adam_step(&mut ps, &[vec![0.1 * s as f64 - 0.2]], &mut st, s, &OptimizerConfig::default());
            }
            ps.get(0).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
