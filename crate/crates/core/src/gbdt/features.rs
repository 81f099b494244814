//! Per-beat feature rows for the stacked model: stage-2 outputs, their
//! record-wide aggregates and RR-interval features.

use serde::{Deserialize, Serialize};

use crate::cls::BeatDescriptor;
use crate::error::{Error, Result};
use crate::preprocess::median;

/// RR used when a record offers none, and absent a training-corpus median.
pub const DEFAULT_RR_MS: f64 = 800.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Beats in the wide and narrow local-rate windows.
    pub local_wide: usize,
    pub local_narrow: usize,
    /// Stand-in for the first beat's RR and for records with one beat.
    pub rr_default_ms: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { local_wide: 100, local_narrow: 10, rr_default_ms: DEFAULT_RR_MS }
    }
}

/// Dense row-major matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub n_rows: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let n_cols = names.len();
        if n_cols == 0 || !data.len().is_multiple_of(n_cols) {
            return Err(Error::Shape(format!("{} values do not fill rows of {n_cols} columns", data.len())));
        }
        Ok(Self { n_rows: data.len() / n_cols, names, data })
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.n_cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.data[i * self.n_cols() + j]).collect()
    }

    /// Rows of `other` appended; column names must agree.
    pub fn append(&mut self, other: &FeatureMatrix) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Shape("feature matrices have different columns".into()));
        }
        self.data.extend_from_slice(&other.data);
        self.n_rows += other.n_rows;
        Ok(())
    }

    pub fn empty(names: Vec<String>) -> Self {
        Self { names, n_rows: 0, data: Vec::new() }
    }
}

pub fn feature_names(embedding_dim: usize) -> Vec<String> {
    let mut names = vec!["logit".to_string(), "prob_wide".to_string()];
    names.extend((0..embedding_dim).map(|i| format!("e_{i}")));
    let values: Vec<String> = std::iter::once("logit".to_string()).chain((0..embedding_dim).map(|i| format!("e_{i}"))).collect();
    for v in &values {
        for agg in ["mean", "median", "std"] {
            names.push(format!("{agg}_{v}"));
        }
    }
    for n in ["rr", "rr_mean", "rr_median", "rr_local_wide", "rr_local_narrow"] {
        names.push(n.to_string());
    }
    for n in ["rr_mean", "rr_median", "rr_local_wide", "rr_local_narrow"] {
        names.push(format!("rr_over_{}", n.trim_start_matches("rr_")));
    }
    names
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Index range of the `k` beats nearest beat `i`, cut at the record edges.
pub fn local_window(i: usize, k: usize, n: usize) -> std::ops::Range<usize> {
    let lo = i.saturating_sub(k / 2);
    let hi = (i + k.div_ceil(2)).min(n);
    lo..hi.max(lo)
}

/// RR intervals in ms; the first is `default_ms`.
pub fn rr_intervals(positions: &[usize], fs: f64, default_ms: f64) -> Vec<f64> {
    (0..positions.len())
        .map(|i| if i == 0 { default_ms } else { (positions[i] - positions[i - 1]) as f64 / fs * 1000.0 })
        .collect()
}

/// Mean RR of the beats in `range`, ignoring the imputed first interval.
fn local_mean_rr(rr: &[f64], range: std::ops::Range<usize>, default_ms: f64) -> f64 {
    let range = range.start.max(1)..range.end;
    if range.is_empty() {
        default_ms
    } else {
        mean(&rr[range])
    }
}

pub fn build_features(descriptors: &[BeatDescriptor], fs: f64, config: &FeatureConfig) -> Result<FeatureMatrix> {
    let n = descriptors.len();
    if n == 0 {
        return Err(Error::Dataset("feature building needs at least one beat".into()));
    }
    let d = descriptors[0].embedding.len();
    if descriptors.iter().any(|x| x.embedding.len() != d) {
        return Err(Error::Shape("descriptors have differing embedding lengths".into()));
    }
    if descriptors.windows(2).any(|w| w[1].position <= w[0].position) {
        return Err(Error::Dataset("descriptors must be in strictly increasing position order".into()));
    }
    if !(fs > 0.0) || config.local_wide == 0 || config.local_narrow == 0 || !(config.rr_default_ms > 0.0) {
        return Err(Error::Config("feature windows, fs and the default RR must be positive".into()));
    }
    let names = feature_names(d);

    let mut aggregates = Vec::with_capacity(3 * (d + 1));
    let mut push_agg = |col: Vec<f64>| {
        aggregates.push(mean(&col));
        aggregates.push(median(&col));
        aggregates.push(std(&col));
    };
    push_agg(descriptors.iter().map(|x| x.logit).collect());
    for j in 0..d {
        push_agg(descriptors.iter().map(|x| x.embedding[j]).collect());
    }

    let positions: Vec<usize> = descriptors.iter().map(|x| x.position).collect();
    let rr = rr_intervals(&positions, fs, config.rr_default_ms);
    let (rr_mean, rr_median) =
        if n > 1 { (mean(&rr[1..]), median(&rr[1..])) } else { (config.rr_default_ms, config.rr_default_ms) };

    let mut data = Vec::with_capacity(n * names.len());
    for (i, x) in descriptors.iter().enumerate() {
        data.push(x.logit);
        data.push(x.prob_wide);
        data.extend_from_slice(&x.embedding);
        data.extend_from_slice(&aggregates);
        let wide = local_mean_rr(&rr, local_window(i, config.local_wide, n), config.rr_default_ms);
        let narrow = local_mean_rr(&rr, local_window(i, config.local_narrow, n), config.rr_default_ms);
        let refs = [rr_mean, rr_median, wide, narrow];
        data.push(rr[i]);
        data.extend_from_slice(&refs);
        data.extend(refs.iter().map(|r| rr[i] / r));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dataset("non-finite feature value".into()));
    }
    FeatureMatrix::new(names, data)
}
