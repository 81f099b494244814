use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakConfig {
    pub prob_threshold: f64,
    pub min_distance_ms: f64,
    /// Fraction of a window shared with the next one during inference.
    pub window_overlap: f64,
    /// Samples within this of a maximum count as part of its flat top.
    pub plateau_tolerance: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { prob_threshold: 0.5, min_distance_ms: 200.0, window_overlap: 0.5, plateau_tolerance: 0.01 }
    }
}

impl PeakConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config(format!("prob_threshold must lie in (0, 1), got {}", self.prob_threshold)));
        }
        if !(self.min_distance_ms > 0.0) {
            return Err(Error::Config("min_distance_ms must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.window_overlap) {
            return Err(Error::Config("window_overlap must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_tolerance) {
            return Err(Error::Config("plateau_tolerance must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn min_distance_samples(&self, fs: f64) -> usize {
        ((self.min_distance_ms * 1e-3 * fs).round() as usize).max(1)
    }
}

/// Local maxima strictly above `threshold`; a flat top yields its centre.
pub fn local_maxima(x: &[f64], threshold: f64) -> Vec<usize> {
    let n = x.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[j + 1] == x[i] {
            j += 1;
        }
        let left_lower = i == 0 || x[i - 1] < x[i];
        let right_lower = j + 1 == n || x[j + 1] < x[i];
        let interior = i > 0 || j + 1 < n;
        if x[i] > threshold && left_lower && right_lower && interior {
            out.push((i + j) / 2);
        }
        i = j + 1;
    }
    out
}

/// Keeps the highest candidates such that no two are closer than
/// `min_distance`; ties go to the earlier index. Output is sorted.
pub fn suppress_non_maxima(x: &[f64], candidates: &[usize], min_distance: usize) -> Vec<usize> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in order {
        let pos = kept.partition_point(|&k| k < c);
        let near_left = pos > 0 && c - kept[pos - 1] < min_distance;
        let near_right = pos < kept.len() && kept[pos] - c < min_distance;
        if !near_left && !near_right {
            kept.insert(pos, c);
        }
    }
    kept
}

/// Centre of the run around `m` staying within `tol` of `x[m]` and above
/// `threshold`.
pub fn plateau_centre(x: &[f64], m: usize, tol: f64, threshold: f64) -> usize {
    let floor = x[m] - tol;
    let inside = |v: f64| v >= floor && v > threshold;
    let mut lo = m;
    while lo > 0 && inside(x[lo - 1]) {
        lo -= 1;
    }
    let mut hi = m;
    while hi + 1 < x.len() && inside(x[hi + 1]) {
        hi += 1;
    }
    (lo + hi) / 2
}

/// Beat positions from a per-sample probability trace.
pub fn extract_peaks(trace: &[f64], fs: f64, cfg: &PeakConfig) -> Vec<usize> {
    let mut cands: Vec<usize> = local_maxima(trace, cfg.prob_threshold)
        .into_iter()
        .map(|m| plateau_centre(trace, m, cfg.plateau_tolerance, cfg.prob_threshold))
        .collect();
    cands.sort_unstable();
    cands.dedup();
    suppress_non_maxima(trace, &cands, cfg.min_distance_samples(fs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::beat_mask;
    use proptest::prelude::*;

    #[test]
    fn ideal_mask_gives_every_beat() {
        let fs = 125.0;
        let truth: Vec<usize> = (0..60).map(|k| 62 + 125 * k).collect();
        let mask = beat_mask(60 * 125, &truth, 6);
        let peaks = extract_peaks(&mask, fs, &PeakConfig::default());
        assert_eq!(peaks, truth);
    }

    #[test]
    fn zeros_give_nothing() {
        assert!(extract_peaks(&[0.0; 1000], 125.0, &PeakConfig::default()).is_empty());
    }

    #[test]
    fn plateau_centre() {
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 1.0, 0.0], 0.5), vec![2]);
        assert_eq!(local_maxima(&[1.0, 0.0, 0.7], 0.5), vec![0, 2]);
        assert!(local_maxima(&[0.9; 5], 0.5).is_empty());
    }

    #[test]
    fn near_flat_top_is_centred() {
        let x = [0.0, 0.2, 0.999, 0.9999, 0.998, 0.997, 0.996, 0.995, 0.3, 0.0];
        assert_eq!(local_maxima(&x, 0.5), vec![3]);
        assert_eq!(extract_peaks(&x, 125.0, &PeakConfig::default()), vec![4]);
        let exact = PeakConfig { plateau_tolerance: 0.0, ..Default::default() };
        assert_eq!(extract_peaks(&x, 125.0, &exact), vec![3]);
    }

    #[test]
    fn close_peaks_keep_higher() {
        let mut x = vec![0.0; 100];
        x[40] = 0.8;
        x[50] = 0.9;
        x[80] = 0.6;
        assert_eq!(extract_peaks(&x, 125.0, &PeakConfig::default()), vec![50, 80]);
    }

    proptest! {
        #[test]
        fn output_sorted_and_spaced(v in proptest::collection::vec(0.0f64..1.0, 0..400)) {
            let p = extract_peaks(&v, 125.0, &PeakConfig::default());
            for w in p.windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!(w[1] - w[0] >= 25);
            }
            for &i in &p {
                prop_assert!(v[i] > 0.5);
            }
        }
    }
}
