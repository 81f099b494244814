//! Gradient-boosted regression trees on the logistic loss with quantile
//! histogram split finding.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::sigmoid;

use super::features::FeatureMatrix;

pub const GBDT_FORMAT: &str = "holter-gbdt";
const LAMBDA: f64 = 1.0;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub max_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub n_bins: usize,
    pub early_stopping_rounds: usize,
    /// Fraction of rows drawn for each tree.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            max_trees: 1000,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 20,
            n_bins: 256,
            early_stopping_rounds: 50,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 || self.early_stopping_rounds == 0 {
            return Err(Error::Config("GBDT counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("GBDT learning_rate must be positive".into()));
        }
        if !(2..=256).contains(&self.n_bins) {
            return Err(Error::Config(format!("n_bins must be in 2..=256, got {}", self.n_bins)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::Config("subsample must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub format: String,
    pub version: u32,
    pub feature_names: Vec<String>,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    pub best_iteration: usize,
    /// Validation log loss after each iteration, starting with zero trees.
    pub valid_logloss: Vec<f64>,
    pub train_logloss: Vec<f64>,
    /// Stand-in RR used when building features for this model.
    pub rr_default_ms: f64,
}

impl GbdtModel {
    pub fn raw_score(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| self.learning_rate * t.predict_row(x)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != GBDT_FORMAT || m.version != 1 {
            return Err(Error::Model(format!("unsupported GBDT file {:?} v{}", m.format, m.version)));
        }
        for t in &m.trees {
            for n in &t.nodes {
                if let Node::Split { feature, left, right, .. } = *n {
                    if feature >= m.feature_names.len() || left >= t.nodes.len() || right >= t.nodes.len() {
                        return Err(Error::Model("GBDT tree refers outside its bounds".into()));
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn gbdt_predict(model: &GbdtModel, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
    if matrix.names != model.feature_names {
        return Err(Error::Shape(format!(
            "model expects {} features, matrix has {} (or names differ)",
            model.feature_names.len(),
            matrix.n_cols()
        )));
    }
    Ok((0..matrix.n_rows).map(|i| sigmoid(model.raw_score(matrix.row(i)))).collect())
}

pub fn logloss(p: &[f64], y: &[f64]) -> f64 {
    let eps = 1e-15;
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    s / p.len() as f64
}

/// Split thresholds of one feature: midpoints between consecutive distinct
/// values, thinned to quantiles when there are more than `n_bins` values.
pub fn bin_thresholds(values: &[f64], n_bins: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.len() <= 1 {
        return Vec::new();
    }
    let mids: Vec<f64> = v.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0).collect();
    if v.len() <= n_bins {
        return mids;
    }
    // quantile cut points over the sorted sample, snapped to midpoints
    let mut all = values.to_vec();
    all.sort_by(f64::total_cmp);
    let mut cuts = Vec::with_capacity(n_bins - 1);
    for q in 1..n_bins {
        let x = all[(q * all.len() / n_bins).min(all.len() - 1)];
        // first midpoint at or above x keeps x on its left
        let k = mids.partition_point(|&m| m < x);
        if k < mids.len() {
            cuts.push(mids[k]);
        }
    }
    cuts.dedup();
    cuts
}

pub fn bin_of(x: f64, thresholds: &[f64]) -> usize {
    thresholds.partition_point(|&t| t < x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub n_left: usize,
}

fn gain_of(gl: f64, hl: f64, g: f64, h: f64) -> f64 {
    let gr = g - gl;
    let hr = h - hl;
    gl * gl / (hl + LAMBDA) + gr * gr / (hr + LAMBDA) - g * g / (h + LAMBDA)
}

fn better(c: &SplitChoice, best: &Option<SplitChoice>) -> bool {
    c.gain > MIN_GAIN && best.as_ref().is_none_or(|b| c.gain > b.gain)
}

/// Best split over raw values, trying every distinct-value boundary.
pub fn exact_best_split(x: &FeatureMatrix, rows: &[usize], grad: &[f64], hess: &[f64], min_leaf: usize) -> Option<SplitChoice> {
    let g: f64 = rows.iter().map(|&i| grad[i]).sum();
    let h: f64 = rows.iter().map(|&i| hess[i]).sum();
    let mut best = None;
    for f in 0..x.n_cols() {
        let mut order: Vec<usize> = rows.to_vec();
        order.sort_by(|&a, &b| x.row(a)[f].total_cmp(&x.row(b)[f]));
        let (mut gl, mut hl) = (0.0, 0.0);
        for k in 0..order.len().saturating_sub(1) {
            gl += grad[order[k]];
            hl += hess[order[k]];
            let (a, b) = (x.row(order[k])[f], x.row(order[k + 1])[f]);
            let n_left = k + 1;
            if a == b || n_left < min_leaf || order.len() - n_left < min_leaf {
                continue;
            }
            let c = SplitChoice { feature: f, threshold: a + (b - a) / 2.0, gain: gain_of(gl, hl, g, h), n_left };
            if better(&c, &best) {
                best = Some(c);
            }
        }
    }
    best
}

/// Rows binned once against per-feature thresholds.
#[derive(Debug, Clone)]
pub struct Binned {
    pub thresholds: Vec<Vec<f64>>,
    /// Column-major bin indices.
    pub bins: Vec<Vec<u8>>,
}

impl Binned {
    pub fn new(x: &FeatureMatrix, n_bins: usize) -> Self {
        let thresholds: Vec<Vec<f64>> = (0..x.n_cols()).map(|f| bin_thresholds(&x.column(f), n_bins)).collect();
        let bins = (0..x.n_cols()).map(|f| (0..x.n_rows).map(|i| bin_of(x.row(i)[f], &thresholds[f]) as u8).collect()).collect();
        Self { thresholds, bins }
    }
}

/// Best split using bin histograms.
pub fn histogram_best_split(b: &Binned, rows: &[usize], grad: &[f64], hess: &[f64], min_leaf: usize) -> Option<SplitChoice> {
    let g: f64 = rows.iter().map(|&i| grad[i]).sum();
    let h: f64 = rows.iter().map(|&i| hess[i]).sum();
    let mut best = None;
    let mut hg = vec![0.0; 256];
    let mut hh = vec![0.0; 256];
    let mut hc = vec![0usize; 256];
    for (f, th) in b.thresholds.iter().enumerate() {
        if th.is_empty() {
            continue;
        }
        let nb = th.len() + 1;
        hg[..nb].fill(0.0);
        hh[..nb].fill(0.0);
        hc[..nb].fill(0);
        let col = &b.bins[f];
        for &i in rows {
            let k = col[i] as usize;
            hg[k] += grad[i];
            hh[k] += hess[i];
            hc[k] += 1;
        }
        let (mut gl, mut hl, mut nl) = (0.0, 0.0, 0usize);
        for k in 0..nb - 1 {
            gl += hg[k];
            hl += hh[k];
            nl += hc[k];
            if hc[k] == 0 || nl < min_leaf || rows.len() - nl < min_leaf {
                continue;
            }
            let c = SplitChoice { feature: f, threshold: th[k], gain: gain_of(gl, hl, g, h), n_left: nl };
            if better(&c, &best) {
                best = Some(c);
            }
        }
    }
    best
}

fn leaf_value(rows: &[usize], grad: &[f64], hess: &[f64]) -> f64 {
    let g: f64 = rows.iter().map(|&i| grad[i]).sum();
    let h: f64 = rows.iter().map(|&i| hess[i]).sum();
    -g / (h + LAMBDA)
}

fn grow(x: &FeatureMatrix, b: &Binned, rows: Vec<usize>, grad: &[f64], hess: &[f64], cfg: &GbdtConfig) -> Tree {
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![(0usize, rows, 0usize)];
    while let Some((id, rows, depth)) = stack.pop() {
        let split = if depth < cfg.max_depth && rows.len() >= 2 * cfg.min_samples_leaf {
            histogram_best_split(b, &rows, grad, hess, cfg.min_samples_leaf)
        } else {
            None
        };
        match split {
            None => nodes[id] = Node::Leaf { value: leaf_value(&rows, grad, hess) },
            Some(s) => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.row(i)[s.feature] <= s.threshold);
                let (li, ri) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf { value: 0.0 });
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[id] = Node::Split { feature: s.feature, threshold: s.threshold, left: li, right: ri };
                stack.push((ri, r, depth + 1));
                stack.push((li, l, depth + 1));
            }
        }
    }
    Tree { nodes }
}

fn check_labels(y: &[f64], n: usize, what: &str) -> Result<()> {
    if y.len() != n {
        return Err(Error::Shape(format!("{what}: {} labels for {n} rows", y.len())));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Dataset(format!("{what}: labels must be 0 or 1")));
    }
    Ok(())
}

/// Boosts until validation log loss stops improving; the returned model is
/// cut back to the best iteration.
pub fn train_gbdt(
    train: &FeatureMatrix,
    train_y: &[f64],
    valid: &FeatureMatrix,
    valid_y: &[f64],
    cfg: &GbdtConfig,
) -> Result<GbdtModel> {
    cfg.validate()?;
    check_labels(train_y, train.n_rows, "training")?;
    check_labels(valid_y, valid.n_rows, "validation")?;
    if valid.names != train.names {
        return Err(Error::Shape("training and validation matrices have different columns".into()));
    }
    if train.n_rows == 0 || valid.n_rows == 0 {
        return Err(Error::Dataset("GBDT needs non-empty training and validation sets".into()));
    }
    let positives = train_y.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == train.n_rows {
        return Err(Error::Dataset("GBDT training labels hold a single class".into()));
    }
    if train.data.iter().chain(&valid.data).any(|v| !v.is_finite()) {
        return Err(Error::Dataset("GBDT features must be finite".into()));
    }

    let binned = Binned::new(train, cfg.n_bins);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut score_t = vec![0.0; train.n_rows];
    let mut score_v = vec![0.0; valid.n_rows];
    let probs = |s: &[f64]| s.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>();
    let mut train_ll = vec![logloss(&probs(&score_t), train_y)];
    let mut valid_ll = vec![logloss(&probs(&score_v), valid_y)];
    let mut trees = Vec::new();
    let mut best = 0;
    while trees.len() < cfg.max_trees && trees.len() - best < cfg.early_stopping_rounds {
        let p = probs(&score_t);
        let grad: Vec<f64> = p.iter().zip(train_y).map(|(p, y)| p - y).collect();
        let hess: Vec<f64> = p.iter().map(|p| p * (1.0 - p)).collect();
        let rows: Vec<usize> = if cfg.subsample < 1.0 {
            let k = ((cfg.subsample * train.n_rows as f64).round() as usize).max(1);
            let mut r = sample(&mut rng, train.n_rows, k).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..train.n_rows).collect()
        };
        let tree = grow(train, &binned, rows, &grad, &hess, cfg);
        for (i, s) in score_t.iter_mut().enumerate() {
            *s += cfg.learning_rate * tree.predict_row(train.row(i));
        }
        for (i, s) in score_v.iter_mut().enumerate() {
            *s += cfg.learning_rate * tree.predict_row(valid.row(i));
        }
        trees.push(tree);
        train_ll.push(logloss(&probs(&score_t), train_y));
        let vl = logloss(&probs(&score_v), valid_y);
        if vl < valid_ll[best] {
            best = trees.len();
        }
        valid_ll.push(vl);
    }
    log::info!("GBDT: {} trees grown, best iteration {best} (validation log loss {:.5})", trees.len(), valid_ll[best]);
    trees.truncate(best);
    Ok(GbdtModel {
        format: GBDT_FORMAT.into(),
        version: 1,
        feature_names: train.names.clone(),
        learning_rate: cfg.learning_rate,
        trees,
        best_iteration: best,
        valid_logloss: valid_ll,
        train_logloss: train_ll,
        rr_default_ms: super::features::DEFAULT_RR_MS,
    })
}
