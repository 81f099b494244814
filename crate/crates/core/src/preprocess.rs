//! Noise-reduction chain applied to raw recordings: disconnection gap
//! filling, baseline removal, 40 Hz low-pass, decimation, and the per-window
//! amplitude normalization used by both networks.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::EcgRecord;

/// Number of taps of the low-pass FIR.
pub const LOWPASS_TAPS: usize = 101;

/// Floor applied to the interquartile range during normalization.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub mean_filter_window: usize,
    pub lowpass_cutoff_hz: f64,
    pub downsample_factor: usize,
    /// Exact-zero runs at least this long are treated as electrode disconnection.
    pub gap_zero_run_min: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { mean_filter_window: 100, lowpass_cutoff_hz: 40.0, downsample_factor: 2, gap_zero_run_min: 10 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self, fs: f64) -> Result<()> {
        if self.mean_filter_window == 0 {
            return Err(Error::Config("mean_filter_window must be at least 1".into()));
        }
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample_factor must be at least 1".into()));
        }
        if self.gap_zero_run_min == 0 {
            return Err(Error::Config("gap_zero_run_min must be at least 1".into()));
        }
        check_cutoff(fs, self.lowpass_cutoff_hz)
    }

    pub fn output_fs(&self, fs: f64) -> f64 {
        fs / self.downsample_factor as f64
    }
}

fn check_cutoff(fs: f64, cutoff_hz: f64) -> Result<()> {
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::Config(format!("cutoff {cutoff_hz} Hz must lie in (0, fs/2) for fs = {fs} Hz")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilledChannel {
    pub samples: Vec<f64>,
    /// The channel contained no non-zero sample at all.
    pub disconnected: bool,
}

/// Replaces long exact-zero runs by a linear ramp between their bounding
/// non-zero samples. Runs touching a record edge hold the nearest non-zero value.
pub fn fill_gaps(x: &[f64], gap_zero_run_min: usize) -> FilledChannel {
    let mut out = x.to_vec();
    let Some(first_nz) = x.iter().position(|&v| v != 0.0) else {
        return FilledChannel { samples: out, disconnected: true };
    };
    let mut i = 0;
    while i < x.len() {
        if x[i] != 0.0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < x.len() && x[i] == 0.0 {
            i += 1;
        }
        let end = i; // exclusive
        if end - start < gap_zero_run_min {
            continue;
        }
        match (start.checked_sub(1), (end < x.len()).then_some(end)) {
            (Some(a), Some(b)) => {
                let (va, vb) = (x[a], x[b]);
                let span = (b - a) as f64;
                for (k, v) in out[start..end].iter_mut().enumerate() {
                    let t = (k + 1) as f64 / span;
                    *v = va + (vb - va) * t;
                }
            }
            (None, Some(b)) => out[start..end].fill(x[b]),
            (Some(a), None) => out[start..end].fill(x[a]),
            (None, None) => unreachable!("channel has a non-zero sample at {first_nz}"),
        }
    }
    FilledChannel { samples: out, disconnected: false }
}

/// Centered moving average; windows are truncated at the edges.
///
/// For even windows the extra sample sits before the centre.
pub fn mean_filter(x: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    mean_filter_split(x, window / 2, window - window / 2 - 1)
}

/// Moving average over `[i - before, i + after]`, clipped to the signal.
///
/// Sums are taken relative to the first sample so that a constant input
/// yields exactly that constant.
pub fn mean_filter_split(x: &[f64], before: usize, after: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let reference = x[0];
    let mut out = Vec::with_capacity(n);
    // Window for output i spans [i - before, i + after], clipped to [0, n).
    let mut lo = 0usize;
    let mut hi = 0usize; // exclusive
    let mut sum = 0.0;
    for i in 0..n {
        let want_lo = i.saturating_sub(before);
        let want_hi = (i + after + 1).min(n);
        while hi < want_hi {
            sum += x[hi] - reference;
            hi += 1;
        }
        while lo < want_lo {
            sum -= x[lo] - reference;
            lo += 1;
        }
        out.push(reference + sum / (hi - lo) as f64);
    }
    out
}

/// Removes baseline wander: `x - mean(mean(x, w), w)`.
///
/// The second pass mirrors the first one's off-centre split, so the
/// combined smoother is symmetric for even `w` as well.
pub fn detrend(x: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let (b, a) = (window / 2, window - window / 2 - 1);
    let baseline = mean_filter_split(&mean_filter_split(x, b, a), a, b);
    x.iter().zip(&baseline).map(|(v, b)| v - b).collect()
}

/// Hamming-windowed sinc low-pass, normalized to unit DC gain.
pub fn design_lowpass(fs: f64, cutoff_hz: f64, taps: usize) -> Vec<f64> {
    let fc = cutoff_hz / fs;
    let m = (taps - 1) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let k = i as f64 - m / 2.0;
            let sinc = if k == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * k).sin() / (PI * k) };
            let w = if taps == 1 { 1.0 } else { 0.54 - 0.46 * (2.0 * PI * i as f64 / m).cos() };
            sinc * w
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Band-pass as the difference of two unit-gain low-passes.
pub fn design_bandpass(fs: f64, low_hz: f64, high_hz: f64, taps: usize) -> Vec<f64> {
    let hi = design_lowpass(fs, high_hz, taps);
    let lo = design_lowpass(fs, low_hz, taps);
    hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
}

/// Index into `[0, n)` with whole-sample symmetric reflection (`x[-1] = x[1]`).
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Convolves with an odd-length symmetric kernel centered on each sample,
/// reflecting the signal at both edges. No delay is introduced.
pub fn fir_zero_phase(x: &[f64], kernel: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let half = (kernel.len() / 2) as isize;
    let padded: Vec<f64> = (-half..n as isize + half).map(|i| x[reflect_index(i, n)]).collect();
    (0..n).map(|i| kernel.iter().zip(&padded[i..i + kernel.len()]).map(|(k, v)| k * v).sum()).collect()
}

pub fn lowpass(x: &[f64], fs: f64, cutoff_hz: f64) -> Result<Vec<f64>> {
    check_cutoff(fs, cutoff_hz)?;
    Ok(fir_zero_phase(x, &design_lowpass(fs, cutoff_hz, LOWPASS_TAPS)))
}

/// Keeps samples `0, factor, 2*factor, ...`. Callers low-pass first.
pub fn downsample(x: &[f64], factor: usize) -> Vec<f64> {
    assert!(factor >= 1, "downsample factor must be at least 1");
    x.iter().step_by(factor).copied().collect()
}

/// Linearly interpolated quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Median and interquartile range.
pub fn robust_location_scale(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, SCALE_FLOOR);
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    (median(&s), iqr.max(SCALE_FLOOR))
}

/// Per channel: subtract the median, divide by the (floored) IQR.
pub fn normalize_channel(x: &mut [f64]) {
    let (m, scale) = robust_location_scale(x);
    x.iter_mut().for_each(|v| *v = (*v - m) / scale);
}

pub fn normalize_window(window: &mut [Vec<f64>]) {
    for ch in window.iter_mut() {
        normalize_channel(ch);
    }
}

/// Full chain per channel: fill gaps, detrend, low-pass, downsample.
pub fn preprocess_record(record: &EcgRecord, config: &PreprocessConfig) -> Result<EcgRecord> {
    record.validate()?;
    config.validate(record.fs)?;
    let channels = (0..record.n_channels())
        .map(|c| {
            let filled = fill_gaps(&record.channel_f64(c), config.gap_zero_run_min);
            let flat = detrend(&filled.samples, config.mean_filter_window);
            let smooth = fir_zero_phase(&flat, &design_lowpass(record.fs, config.lowpass_cutoff_hz, LOWPASS_TAPS));
            downsample(&smooth, config.downsample_factor).into_iter().map(|v| v as f32).collect()
        })
        .collect();
    EcgRecord::new(record.record_id.clone(), config.output_fs(record.fs), channels)
}

/// Linear-interpolation resampling to `fs_out`. When the rate drops, a
/// low-pass at 0.4 `fs_out` runs first.
pub fn resample_linear(x: &[f64], fs_in: f64, fs_out: f64) -> Vec<f64> {
    if x.is_empty() || fs_in == fs_out {
        return x.to_vec();
    }
    let src = if fs_out < fs_in { fir_zero_phase(x, &design_lowpass(fs_in, 0.4 * fs_out, LOWPASS_TAPS)) } else { x.to_vec() };
    let n_out = ((x.len() as f64) * fs_out / fs_in).floor().max(1.0) as usize;
    (0..n_out)
        .map(|i| {
            let t = i as f64 * fs_in / fs_out;
            let j = (t.floor() as usize).min(src.len() - 1);
            let frac = t - j as f64;
            match src.get(j + 1) {
                Some(&next) => src[j] * (1.0 - frac) + next * frac,
                None => src[j],
            }
        })
        .collect()
}

/// Resamples every channel; rates other than the models' (e.g. MIT-BIH's
/// 360 Hz) go through this before [`preprocess_record`].
pub fn resample_record(record: &EcgRecord, fs_out: f64) -> Result<EcgRecord> {
    record.validate()?;
    if !(fs_out > 0.0 && fs_out.is_finite()) {
        return Err(Error::Config(format!("target rate must be positive, got {fs_out}")));
    }
    let channels = (0..record.n_channels())
        .map(|c| resample_linear(&record.channel_f64(c), record.fs, fs_out).into_iter().map(|v| v as f32).collect())
        .collect();
    EcgRecord::new(record.record_id.clone(), fs_out, channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn resample_360_to_250_keeps_sine() {
        let x = sine(5.0, 360.0, 3600);
        let y = resample_linear(&x, 360.0, 250.0);
        assert_eq!(y.len(), 2500);
        let want = sine(5.0, 250.0, 2500);
        let err = y[200..2300].iter().zip(&want[200..2300]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 0.01, "{err}");
        assert_eq!(resample_linear(&x, 360.0, 360.0), x);
    }

    #[test]
    fn resample_record_rate() {
        let r = EcgRecord::new("r", 360.0, vec![vec![1.0; 720], vec![2.0; 720]]).unwrap();
        let o = resample_record(&r, 250.0).unwrap();
        assert_eq!((o.fs, o.n_samples(), o.n_channels()), (250.0, 500, 2));
        assert!(o.channels[1][100..400].iter().all(|&v| (v - 2.0).abs() < 1e-5));
        assert!(resample_record(&r, 0.0).is_err());
    }

    #[test]
    fn interior_gap_is_ramp() {
        let out = fill_gaps(&[5.0, 0.0, 0.0, 0.0, 9.0], 2);
        assert_eq!(out.samples, vec![5.0, 6.0, 7.0, 8.0, 9.0]);
        assert!(!out.disconnected);
    }

    #[test]
    fn leading_gap_holds_first_value() {
        assert_eq!(fill_gaps(&[0.0, 0.0, 3.0, 4.0], 2).samples, vec![3.0, 3.0, 3.0, 4.0]);
        assert_eq!(fill_gaps(&[3.0, 4.0, 0.0, 0.0], 2).samples, vec![3.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn short_run_untouched() {
        assert_eq!(fill_gaps(&[1.0, 0.0, 2.0], 2).samples, vec![1.0, 0.0, 2.0]);
    }

    #[test]
    fn all_zero_channel_flagged() {
        let out = fill_gaps(&[0.0; 20], 2);
        assert!(out.disconnected);
        assert_eq!(out.samples, vec![0.0; 20]);
    }

    #[test]
    fn detrend_constant_is_exactly_zero() {
        for c in [0.1, -3.7, 1e5, 0.3] {
            let x = vec![c; 777];
            assert!(detrend(&x, 100).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn detrend_ramp_interior_vanishes() {
        let w = 100;
        let x: Vec<f64> = (0..1000).map(|i| 0.01 * i as f64 - 2.0).collect();
        let y = detrend(&x, w);
        for &v in &y[2 * w..1000 - 2 * w] {
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn detrend_keeps_qrs_spike() {
        let fs = 250.0;
        let sigma = 0.012 * fs;
        let x: Vec<f64> = (0..2000).map(|i| (-0.5 * ((i as f64 - 1000.0) / sigma).powi(2)).exp()).collect();
        let y = detrend(&x, 100);
        // Direct computation of the same peak: 1 minus the doubly-averaged spike at its centre.
        let mm = mean_filter_split(&mean_filter_split(&x, 50, 49), 49, 50);
        assert!((y[1000] - (1.0 - mm[1000])).abs() < 1e-12);
        assert!((y[1000] - 1.0).abs() < 0.10, "peak {}", y[1000]);
    }

    #[test]
    fn mean_filter_edges_truncate() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = mean_filter(&x, 3);
        assert_eq!(y, vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        let even = mean_filter(&x, 2);
        // window [i-1, i]
        assert_eq!(even, vec![1.0, 1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn lowpass_dc_gain() {
        let h = design_lowpass(250.0, 40.0, LOWPASS_TAPS);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let y = lowpass(&vec![2.5; 500], 250.0, 40.0).unwrap();
        assert!(y.iter().all(|v| (v - 2.5).abs() / 2.5 < 1e-3));
    }

    #[test]
    fn lowpass_passband_and_stopband() {
        let fs = 250.0;
        let n = 5000;
        let mid = 200..n - 200;
        let pass = sine(5.0, fs, n);
        let y = lowpass(&pass, fs, 40.0).unwrap();
        let ratio = rms(&y[mid.clone()]) / rms(&pass[mid.clone()]);
        assert!((ratio - 1.0).abs() < 0.05, "passband ratio {ratio}");
        let stop = sine(60.0, fs, n);
        let y = lowpass(&stop, fs, 40.0).unwrap();
        let db = 20.0 * (rms(&y[mid.clone()]) / rms(&stop[mid])).log10();
        assert!(db <= -20.0, "60 Hz attenuation {db} dB");
    }

    #[test]
    fn lowpass_rejects_bad_cutoff() {
        assert!(lowpass(&[1.0], 250.0, 125.0).is_err());
        assert!(lowpass(&[1.0], 250.0, 0.0).is_err());
    }

    #[test]
    fn lowpass_is_zero_phase() {
        let mut x = vec![0.0; 401];
        x[200] = 1.0;
        let y = lowpass(&x, 250.0, 40.0).unwrap();
        let arg = (0..401).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        assert_eq!(arg, 200);
    }

    #[test]
    fn short_signals_reflect_safely() {
        assert_eq!(lowpass(&[], 250.0, 40.0).unwrap(), Vec::<f64>::new());
        let y = lowpass(&[3.0], 250.0, 40.0).unwrap();
        assert!((y[0] - 3.0).abs() < 1e-12);
        assert_eq!(lowpass(&[1.0, 2.0, 3.0], 250.0, 40.0).unwrap().len(), 3);
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(downsample(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 3.0]);
        assert_eq!(downsample(&[1.0, 2.0, 3.0], 1), vec![1.0, 2.0, 3.0]);
        assert_eq!(downsample(&[0.0; 5], 2).len(), 3);
    }

    #[test]
    fn normalize_examples() {
        let mut w = vec![vec![1.0, 1.0, 1.0, 1.0], vec![0.0, 2.0, 4.0, 6.0]];
        normalize_window(&mut w);
        assert_eq!(w[0], vec![0.0; 4]);
        let want = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (a, b) in w[1].iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn preprocess_halves_fs() {
        let rec = EcgRecord::new("r", 250.0, vec![vec![0.5; 1000], vec![0.1; 1000]]).unwrap();
        let out = preprocess_record(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.fs, 125.0);
        assert_eq!(out.n_samples(), 500);
    }

    #[test]
    fn preprocess_empty_record() {
        let rec = EcgRecord::new("r", 250.0, vec![vec![], vec![]]).unwrap();
        let out = preprocess_record(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(out.n_samples(), 0);
    }

    proptest! {
        #[test]
        fn downsample_length(n in 0usize..500, f in 1usize..9) {
            prop_assert_eq!(downsample(&vec![0.0; n], f).len(), n.div_ceil(f));
        }

        #[test]
        fn lowpass_is_linear(
            x in proptest::collection::vec(-5.0f64..5.0, 1..300),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
            seed in any::<u64>(),
        ) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| ((i as u64 ^ seed) % 17) as f64 * 0.1 - v).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = lowpass(&combo, 250.0, 40.0).unwrap();
            let lx = lowpass(&x, 250.0, 40.0).unwrap();
            let ly = lowpass(&y, 250.0, 40.0).unwrap();
            for i in 0..x.len() {
                prop_assert!((lhs[i] - (a * lx[i] + b * ly[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn normalized_median_is_zero(
            chans in proptest::collection::vec(proptest::collection::vec(-100.0f32..100.0, 1..400), 1..3)
        ) {
            let mut w: Vec<Vec<f64>> = chans.iter().map(|c| c.iter().map(|&v| f64::from(v)).collect()).collect();
            normalize_window(&mut w);
            for c in &w {
                prop_assert_eq!(median(c), 0.0);
            }
        }
    }
}
