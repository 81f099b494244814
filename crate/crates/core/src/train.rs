//! Training loop shared by the segmentation and classification networks.

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, Sample, SamplerConfig, WindowKind, WindowSampler};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, Graph, OptimizerConfig, ParamSet, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Validate every this many steps (and after the last one); 0 disables.
    pub valid_every: usize,
    /// Seeds weight initialization.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            valid_every: 1000,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.augment.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.steps > self.optimizer.total_steps {
            return Err(Error::Config(format!(
                "steps {} exceed the schedule's total_steps {}",
                self.steps, self.optimizer.total_steps
            )));
        }
        Ok(())
    }

    /// Uses `seed` for initialization, sampling and augmentation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sampler.seed = seed;
        self.augment.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: usize,
    /// Higher is better; selects the returned weights.
    pub score: f64,
    pub se: Option<f64>,
    pub plus_p: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training loss of every step.
    pub losses: Vec<f64>,
    pub validations: Vec<Validation>,
    /// Step (1-based count of completed steps) of the returned weights.
    pub best_step: usize,
}

type LossFn<'a> = dyn Fn(&mut Graph, &[Var], &[Sample]) -> Result<Var> + 'a;
type ValidFn<'a> = dyn Fn(&ParamSet, usize) -> Result<Validation> + 'a;

/// Runs Adam on `params` and leaves the best-validating weights in place
/// (latest on ties, rounded to f32 as stored on disk). Without validation
/// the final weights are kept.
pub fn fit(
    params: &mut ParamSet,
    cfg: &TrainConfig,
    kind: WindowKind,
    data: &Dataset,
    loss_fn: &LossFn<'_>,
    validate: Option<&ValidFn<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut sampler = WindowSampler::new(data, cfg.sampler.clone(), cfg.augment.clone())?;
    let mut state = AdamState::new(params);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParamSet)> = None;
    for step in 0..cfg.steps {
        let batch = sampler.batch(kind, cfg.optimizer.batch_size);
        let mut g = Graph::new();
        let pv = params.bind(&mut g);
        let loss = loss_fn(&mut g, &pv, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Model(format!("loss became non-finite at step {step}")));
        }
        let grads = g.backward(loss);
        let gv: Vec<Vec<f64>> = pv.iter().zip(params.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t.len())).collect();
        drop(g);
        adam_step(params, &gv, &mut state, step, &cfg.optimizer);
        log.losses.push(value);
        let done = step + 1;
        let due = cfg.valid_every > 0 && (done % cfg.valid_every == 0 || done == cfg.steps);
        if let (Some(v), true) = (validate, due) {
            let mut snapshot = params.clone();
            snapshot.round_f32();
            let val = v(&snapshot, done)?;
            log::info!("step {done}: loss {value:.4}, validation score {:.4}", val.score);
            if best.as_ref().is_none_or(|(s, _)| val.score >= *s) {
                best = Some((val.score, snapshot));
                log.best_step = done;
            }
            log.validations.push(val);
        } else if done % 100 == 0 {
            log::debug!("step {done}: loss {value:.4}");
        }
    }
    match best {
        Some((_, p)) => *params = p,
        None => {
            params.round_f32();
            log.best_step = cfg.steps;
        }
    }
    Ok(log)
}
