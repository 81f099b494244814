//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Cap on checked elements per tensor, spread evenly; `None` checks all.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, max_per_tensor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub n_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn checked_indices(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares the gradient of the scalar built by `f` with respect to every
/// tensor in `params` against central differences.
pub fn grad_check<F>(params: &ParamSet, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let pv = params.bind(&mut g);
    let loss = f(&mut g, &pv)?;
    let grads = g.backward(loss);
    let analytic: Vec<Vec<f64>> = pv.iter().zip(params.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t.len())).collect();

    let eval = |ps: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let pv = ps.bind_frozen(&mut g);
        let l = f(&mut g, &pv)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        n_checked: 0,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for (ti, name) in params.names().iter().enumerate() {
        for j in checked_indices(params.get(ti).len(), cfg.max_per_tensor) {
            let orig = params.get(ti).data()[j];
            work.get_mut(ti).data_mut()[j] = orig + cfg.h;
            let up = eval(&work)?;
            work.get_mut(ti).data_mut()[j] = orig - cfg.h;
            let down = eval(&work)?;
            work.get_mut(ti).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let e = relative_error(analytic[ti][j], numeric);
            report.n_checked += 1;
            if e > report.max_rel_err || !e.is_finite() {
                report.max_rel_err = e;
                report.worst_param = name.clone();
                report.worst_index = j;
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// One entry of [`op_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub linear: bool,
    pub report: GradCheckReport,
}

pub const LINEAR_TOLERANCE: f64 = 1e-8;
/// Central differences are exact on (piecewise) linear maps, so a larger
/// step only reduces cancellation error.
pub const LINEAR_STEP: f64 = 1e-3;

fn probe<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Distinct, well-separated values so max pooling and ReLU have no kinks
/// within the finite-difference step.
fn separated<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + 0.013).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).expect("sized")
}

/// Gradient checks of every differentiable op on random shapes.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |op: &str, linear: bool, ps: ParamSet, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| -> Result<()> {
        let cfg = if linear {
            GradCheckConfig { h: LINEAR_STEP, tolerance: LINEAR_TOLERANCE, max_per_tensor: None }
        } else {
            GradCheckConfig::default()
        };
        let report = grad_check(&ps, &cfg, f)?;
        out.push(OpCheck { op: op.to_string(), linear, report });
        Ok(())
    };

    let b = rng.random_range(1..=3);
    let c_in = rng.random_range(1..=3);
    let c_out = rng.random_range(1..=4);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let len = rng.random_range(8..=20);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=k / 2);
    let l_out = (len + 2 * pad - k) / stride + 1;

    {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(vec![b, c_in, len], 1.0, &mut rng));
        ps.add("w", Tensor::randn(vec![c_out, c_in, k], 1.0, &mut rng));
        ps.add("b", Tensor::randn(vec![c_out], 1.0, &mut rng));
        let r = probe(b * c_out * l_out, &mut rng);
        run("conv1d", true, ps, &|g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), stride, pad)?;
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", separated(vec![b, c_in, len], &mut rng));
        let pk = rng.random_range(2..=3);
        let r = probe(b * c_in * ((len - pk) / pk + 1), &mut rng);
        run("maxpool1d", true, ps, &|g, v| {
            let y = g.maxpool1d(v[0], pk, pk)?;
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(vec![b, c_in, len], 1.0, &mut rng));
        let (pk, ps_) = (3, 2);
        let r = probe(b * c_in * ((len - pk) / ps_ + 1), &mut rng);
        run("avgpool1d", true, ps, &|g, v| {
            let y = g.avgpool1d(v[0], pk, ps_)?;
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(vec![b, c_in, len], 1.0, &mut rng));
        let r = probe(b * c_in * len * 3, &mut rng);
        run("upsample_nearest", true, ps, &|g, v| {
            let y = g.upsample_nearest(v[0], 3)?;
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", separated(vec![b, c_in, len], &mut rng));
        let r = probe(b * c_in * len, &mut rng);
        run("relu", true, ps, &|g, v| {
            let y = g.relu(v[0]);
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(vec![b, c_in, len], 2.0, &mut rng));
        let r = probe(b * c_in * len, &mut rng);
        run("sigmoid", false, ps, &|g, v| {
            let y = g.sigmoid(v[0]);
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(vec![b, c_out, len], 1.5, &mut rng));
        ps.add("gamma", Tensor::randn(vec![c_out], 1.0, &mut rng));
        ps.add("beta", Tensor::randn(vec![c_out], 1.0, &mut rng));
        let r = probe(b * c_out * len, &mut rng);
        run("channel_norm", false, ps, &|g, v| {
            let y = g.channel_norm(v[0], v[1], v[2], 1e-5)?;
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::randn(vec![b, c_in, len], 1.0, &mut rng));
        ps.add("b", Tensor::randn(vec![b, c_in, len], 1.0, &mut rng));
        ps.add("c", Tensor::randn(vec![b, c_in, len], 1.0, &mut rng));
        let r = probe(b * c_in * len, &mut rng);
        run("mean_of", true, ps, &|g, v| {
            let y = g.mean_of(&[v[0], v[1], v[2]])?;
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let mut ps = ParamSet::new();
        let nc = c_in + 1;
        ps.add("x", Tensor::randn(vec![b, nc, len], 1.0, &mut rng));
        let c = rng.random_range(0..nc);
        let r = probe(b * (len + 5), &mut rng);
        run("select_pad_crop", true, ps, &|g, v| {
            let y = g.select_channel(v[0], c)?;
            let y = g.pad_len(y, 2, 4)?;
            let y = g.crop_len(y, 1, len + 5)?;
            g.weighted_sum(y, &r)
        })?;
    }
    {
        let n_out = rng.random_range(1..=4);
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(vec![b, c_in, len], 1.0, &mut rng));
        ps.add("w", Tensor::randn(vec![n_out, c_in], 1.0, &mut rng));
        ps.add("b", Tensor::randn(vec![n_out], 1.0, &mut rng));
        let r = probe(b * n_out, &mut rng);
        run("global_avg_pool_linear", true, ps, &|g, v| {
            let e = g.global_avg_pool(v[0])?;
            let y = g.linear(e, v[1], v[2])?;
            let y = g.reshape(y, vec![b * n_out])?;
            g.weighted_sum(y, &r)
        })?;
    }
    let n = rng.random_range(4..=30);
    let y = Tensor::new(vec![n], (0..n).map(|i| f64::from(u8::from(i % 3 == 0))).collect())?;
    let p_init = || -> Tensor {
        // well inside (0, 1) so no element sits at the clamp
        Tensor::new(vec![n], (0..n).map(|i| 0.05 + 0.9 * ((i * 7919 + seed as usize) % 97) as f64 / 97.0).collect())
            .expect("sized")
    };
    {
        let mut ps = ParamSet::new();
        ps.add("p", p_init());
        run("bce_loss", false, ps, &|g, v| g.bce_loss(v[0], &y))?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("p", p_init());
        run("focal_loss", false, ps, &|g, v| g.focal_loss(v[0], &y, 2.0))?;
    }
    {
        let mut ps = ParamSet::new();
        ps.add("p", p_init());
        run("dice_loss", false, ps, &|g, v| g.dice_loss(v[0], &y, 1.0))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for seed in 0..5 {
            for c in op_suite(seed).unwrap() {
                assert!(c.report.passed, "seed {seed} {}: {:?}", c.op, c.report);
            }
        }
    }

    #[test]
    fn conv_at_default_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::randn(vec![2, 3, 17], 1.0, &mut rng));
        ps.add("w", Tensor::randn(vec![4, 3, 5], 1.0, &mut rng));
        ps.add("b", Tensor::randn(vec![4], 1.0, &mut rng));
        let r = probe(2 * 4 * 17, &mut rng);
        let rep = grad_check(&ps, &GradCheckConfig::default(), |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), 1, 2)?;
            let y = g.sigmoid(y);
            g.weighted_sum(y, &r)
        })
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn faulty_backward_is_flagged() {
        let mut ps = ParamSet::new();
        ps.add("x", Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let r = [1.0, 2.0, 3.0];
        let rep = grad_check(&ps, &GradCheckConfig::default(), |g, v| {
            let y = g.faulty_identity(v[0]);
            g.weighted_sum(y, &r)
        })
        .unwrap();
        assert!(!rep.passed);
        assert!((rep.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn index_cap_spreads_evenly() {
        assert_eq!(checked_indices(10, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(checked_indices(3, Some(5)), vec![0, 1, 2]);
    }
}
