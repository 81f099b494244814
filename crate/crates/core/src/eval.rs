//! Tolerance-matched detection and wide-class metrics.
//!
//! Matching pairs prediction and truth one-to-one within a tolerance. Pairs
//! are taken greedily by ascending distance; augmenting paths then extend
//! the result to a maximum-cardinality matching, which greedy alone can
//! miss (e.g. preds at 0 and 25, truths at 18 and 43, tolerance 18.75).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{BeatAnnotation, BeatClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub tolerance_ms: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { tolerance_ms: 150.0 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance_ms > 0.0 && self.tolerance_ms.is_finite()) {
            return Err(Error::Config(format!("tolerance_ms must be positive, got {}", self.tolerance_ms)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Se and +P; `None` when the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub se: Option<f64>,
    pub plus_p: Option<f64>,
}

pub fn detection_metrics(c: &Counts) -> Metrics {
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    Metrics { se: ratio(c.tp, c.fn_), plus_p: ratio(c.tp, c.fp) }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// (prediction index, truth index), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub counts: Counts,
}

impl Matching {
    /// Truth index matched to each prediction.
    pub fn truth_of_pred(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for &(p, t) in &self.pairs {
            out[p] = Some(t);
        }
        out
    }
}

fn try_augment(
    start: usize,
    adj: &[Vec<usize>],
    match_t: &mut [Option<usize>],
    match_p: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    // iterative DFS over alternating paths; stack holds (pred, next edge)
    let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
    let mut via: Vec<usize> = Vec::new();
    while let Some(&mut (p, ref mut e)) = stack.last_mut() {
        if *e >= adj[p].len() {
            stack.pop();
            via.pop();
            continue;
        }
        let t = adj[p][*e];
        *e += 1;
        if seen[t] {
            continue;
        }
        seen[t] = true;
        match match_t[t] {
            None => {
                // flip the path: each pred on the stack takes the truth it reached
                via.push(t);
                for (&(pp, _), &tt) in stack.iter().zip(&via) {
                    match_t[tt] = Some(pp);
                    match_p[pp] = Some(tt);
                }
                return true;
            }
            Some(next) => {
                via.push(t);
                stack.push((next, 0));
            }
        }
    }
    false
}

/// One-to-one matching of sorted predictions to sorted truth positions.
pub fn match_beats(pred: &[usize], truth: &[usize], cfg: &MatchConfig, fs: f64) -> Matching {
    let tol = cfg.tolerance_ms * 1e-3 * fs;
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); pred.len()];
    let mut lo = 0;
    for (i, &p) in pred.iter().enumerate() {
        while lo < truth.len() && (truth[lo] as f64) < p as f64 - tol {
            lo += 1;
        }
        let mut j = lo;
        while j < truth.len() && (truth[j] as f64) <= p as f64 + tol {
            cand.push(((p as f64 - truth[j] as f64).abs(), i, j));
            adj[i].push(j);
            j += 1;
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    let mut match_p: Vec<Option<usize>> = vec![None; pred.len()];
    let mut match_t: Vec<Option<usize>> = vec![None; truth.len()];
    for &(_, i, j) in &cand {
        if match_p[i].is_none() && match_t[j].is_none() {
            match_p[i] = Some(j);
            match_t[j] = Some(i);
        }
    }
    let mut seen = vec![false; truth.len()];
    for i in 0..pred.len() {
        if match_p[i].is_some() || adj[i].is_empty() {
            continue;
        }
        seen.iter_mut().for_each(|s| *s = false);
        try_augment(i, &adj, &mut match_t, &mut match_p, &mut seen);
    }
    let pairs: Vec<(usize, usize)> = match_p.iter().enumerate().filter_map(|(i, m)| m.map(|j| (i, j))).collect();
    let tp = pairs.len();
    Matching { counts: Counts { tp, fp: pred.len() - tp, fn_: truth.len() - tp }, pairs }
}

/// Wide-class counts. Detection misses of wide beats are false negatives
/// and unmatched predictions labelled wide are false positives.
pub fn classification_counts(m: &Matching, pred_labels: &[BeatClass], true_labels: &[BeatClass]) -> Counts {
    let mut c = Counts::default();
    let mut truth_used = vec![false; true_labels.len()];
    let mut pred_used = vec![false; pred_labels.len()];
    for &(p, t) in &m.pairs {
        pred_used[p] = true;
        truth_used[t] = true;
        match (pred_labels[p].is_wide(), true_labels[t].is_wide()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c.fn_ += true_labels.iter().zip(&truth_used).filter(|(l, used)| l.is_wide() && !**used).count();
    c.fp += pred_labels.iter().zip(&pred_used).filter(|(l, used)| l.is_wide() && !**used).count();
    c
}

pub fn classification_metrics(m: &Matching, pred_labels: &[BeatClass], true_labels: &[BeatClass]) -> Metrics {
    detection_metrics(&classification_counts(m, pred_labels, true_labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEval {
    pub record_id: String,
    pub detection: Counts,
    pub classification: Counts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tolerance_ms: f64,
    pub records: Vec<RecordEval>,
    pub detection: Counts,
    pub classification: Counts,
    pub detection_metrics: Metrics,
    pub classification_metrics: Metrics,
}

/// Evaluates one record; both annotations must refer to `fs`.
pub fn evaluate_record(record_id: &str, pred: &BeatAnnotation, truth: &BeatAnnotation, cfg: &MatchConfig) -> Result<RecordEval> {
    if pred.fs_ref != truth.fs_ref {
        return Err(Error::Dataset(format!("{record_id}: prediction at {} Hz but truth at {} Hz", pred.fs_ref, truth.fs_ref)));
    }
    let m = match_beats(&pred.positions, &truth.positions, cfg, truth.fs_ref);
    Ok(RecordEval {
        record_id: record_id.to_string(),
        detection: m.counts,
        classification: classification_counts(&m, &pred.labels, &truth.labels),
    })
}

impl EvalReport {
    /// Pools counts over records (micro average).
    pub fn from_records(records: Vec<RecordEval>, cfg: &MatchConfig) -> Self {
        let mut det = Counts::default();
        let mut cls = Counts::default();
        for r in &records {
            det.add(&r.detection);
            cls.add(&r.classification);
        }
        Self {
            tolerance_ms: cfg.tolerance_ms,
            records,
            detection: det,
            classification: cls,
            detection_metrics: detection_metrics(&det),
            classification_metrics: detection_metrics(&cls),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned text table: one row per task, then per-record rows.
    pub fn table(&self) -> String {
        comparison_table(&[("", self)])
    }
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Side-by-side table of several reports (e.g. NN and NN+GBDT).
pub fn comparison_table(reports: &[(&str, &EvalReport)]) -> String {
    let mut rows: Vec<[String; 3]> = vec![["Task".into(), "Se".into(), "+P".into()]];
    for (name, r) in reports {
        let suffix = if name.is_empty() { String::new() } else { format!(" ({name})") };
        rows.push([
            format!("Detection QRS task{suffix}"),
            fmt_metric(r.detection_metrics.se),
            fmt_metric(r.detection_metrics.plus_p),
        ]);
        rows.push([
            format!("Classification QRS task{suffix}"),
            fmt_metric(r.classification_metrics.se),
            fmt_metric(r.classification_metrics.plus_p),
        ]);
    }
    if let [(_, r)] = reports {
        for rec in &r.records {
            let d = detection_metrics(&rec.detection);
            let c = detection_metrics(&rec.classification);
            rows.push([
                format!("  {} detection / wide", rec.record_id),
                format!("{} / {}", fmt_metric(d.se), fmt_metric(c.se)),
                format!("{} / {}", fmt_metric(d.plus_p), fmt_metric(c.plus_p)),
            ]);
        }
    }
    let w: Vec<usize> = (0..3).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (k, r) in rows.iter().enumerate() {
        out.push_str(&format!("{:<w0$}  {:>w1$}  {:>w2$}\n", r[0], r[1], r[2], w0 = w[0], w1 = w[1], w2 = w[2]));
        if k == 0 {
            out.push_str(&format!("{}\n", "-".repeat(w[0] + w[1] + w[2] + 4)));
        }
    }
    out
}
