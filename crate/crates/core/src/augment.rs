//! Training-time augmentations and the class-balanced window sampler.
//!
//! Windows are normalized first, then augmented in a fixed order:
//! channel dropout, additive noise, resampling, channel scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{extract_centered, extract_span, Dataset};
use crate::error::{Error, Result};
use crate::signal_io::BeatClass;

/// Half-width of the box marking each beat in a segmentation target.
pub const MASK_HALF_WIDTH_S: f64 = 0.050;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub channel_dropout_p: f64,
    pub dropout_noise_std: f64,
    pub gaussian_noise_std: f64,
    pub resample_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            channel_dropout_p: 0.9,
            dropout_noise_std: 1.0,
            gaussian_noise_std: 0.05,
            resample_range: [0.7, 1.3],
            scale_range: [0.5, 1.5],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn identity() -> Self {
        Self {
            channel_dropout_p: 0.0,
            dropout_noise_std: 0.0,
            gaussian_noise_std: 0.0,
            resample_range: [1.0, 1.0],
            scale_range: [1.0, 1.0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.channel_dropout_p) {
            return Err(Error::Config(format!("channel_dropout_p {} outside [0, 1]", self.channel_dropout_p)));
        }
        if !(self.dropout_noise_std >= 0.0 && self.gaussian_noise_std >= 0.0) {
            return Err(Error::Config("noise standard deviations must be non-negative".into()));
        }
        for (name, [lo, hi]) in [("resample_range", self.resample_range), ("scale_range", self.scale_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} must be an ordered positive range, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Probability of centring a draw on a wide beat.
    pub wide_p: f64,
    /// Segmentation window length.
    pub window_len_s: f64,
    /// Classification window length.
    pub classification_window_s: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { wide_p: 0.15, window_len_s: 30.0, classification_window_s: 2.0, seed: 0 }
    }
}

pub type Window = Vec<Vec<f64>>;

/// With probability `p`, replaces one uniformly chosen channel by
/// `N(0, noise_std^2)`. Returns the replaced channel, if any.
pub fn channel_dropout<R: Rng + ?Sized>(window: &mut Window, p: f64, noise_std: f64, rng: &mut R) -> Option<usize> {
    if window.len() < 2 {
        return None;
    }
    if rng.random::<f64>() >= p {
        return None;
    }
    let c = rng.random_range(0..window.len());
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("non-negative std");
        window[c].iter_mut().for_each(|v| *v = noise.sample(rng));
    } else {
        window[c].fill(0.0);
    }
    Some(c)
}

pub fn add_noise<R: Rng + ?Sized>(window: &mut Window, std: f64, rng: &mut R) {
    if std <= 0.0 {
        return;
    }
    let noise = Normal::new(0.0, std).expect("non-negative std");
    for ch in window.iter_mut() {
        ch.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
}

/// Stretches the time axis by `factor` around `anchor` with linear
/// interpolation, keeping the window length (zero outside the source).
/// Positions move with the waveform; those leaving the window are dropped.
pub fn resample_by(window: &mut Window, positions: &mut Vec<usize>, factor: f64, anchor: f64) {
    let n = window.first().map_or(0, Vec::len);
    for ch in window.iter_mut() {
        let src = std::mem::take(ch);
        *ch = (0..n)
            .map(|i| {
                let t = anchor + (i as f64 - anchor) / factor;
                if t < 0.0 || t > (n - 1) as f64 {
                    return 0.0;
                }
                let j = t.floor() as usize;
                let frac = t - j as f64;
                if j + 1 < n {
                    src[j] * (1.0 - frac) + src[j + 1] * frac
                } else {
                    src[j]
                }
            })
            .collect();
    }
    *positions = positions
        .iter()
        .filter_map(|&p| {
            let q = (anchor + (p as f64 - anchor) * factor).round();
            (q >= 0.0 && q < n as f64).then_some(q as usize)
        })
        .collect();
}

/// Resamples by `f ~ U[range]` anchored at index 0. Returns `f`.
pub fn random_resample<R: Rng + ?Sized>(window: &mut Window, positions: &mut Vec<usize>, range: [f64; 2], rng: &mut R) -> f64 {
    let f = uniform(range, rng);
    resample_by(window, positions, f, 0.0);
    f
}

pub fn scale_by(window: &mut Window, factors: &[f64]) {
    for (ch, &f) in window.iter_mut().zip(factors) {
        ch.iter_mut().for_each(|v| *v *= f);
    }
}

/// Multiplies each channel by an independent `f ~ U[range]`.
pub fn random_scale<R: Rng + ?Sized>(window: &mut Window, range: [f64; 2], rng: &mut R) -> Vec<f64> {
    let factors: Vec<f64> = (0..window.len()).map(|_| uniform(range, rng)).collect();
    scale_by(window, &factors);
    factors
}

fn uniform<R: Rng + ?Sized>([lo, hi]: [f64; 2], rng: &mut R) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Box mask of half-width `half` samples around each position.
pub fn beat_mask(len: usize, positions: &[usize], half: usize) -> Vec<f64> {
    let mut mask = vec![0.0; len];
    for &p in positions {
        let lo = p.saturating_sub(half);
        let hi = (p + half + 1).min(len);
        if lo < hi {
            mask[lo..hi].fill(1.0);
        }
    }
    mask
}

pub fn mask_half_width(fs: f64) -> usize {
    (MASK_HALF_WIDTH_S * fs).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Segmentation,
    Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Per-sample beat mask.
    Mask(Vec<f64>),
    /// 1.0 for a wide centre beat.
    Label(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: Window,
    /// Beat positions inside the window after augmentation.
    pub positions: Vec<usize>,
    pub target: Target,
    /// Class of the beat the draw was centred on.
    pub anchor_class: BeatClass,
}

/// Draws augmented training windows from a dataset.
pub struct WindowSampler<'a> {
    data: &'a Dataset,
    sampler: SamplerConfig,
    augment: AugmentConfig,
    rng: ChaCha8Rng,
    warned_no_wide: bool,
}

impl<'a> WindowSampler<'a> {
    pub fn new(data: &'a Dataset, sampler: SamplerConfig, augment: AugmentConfig) -> Result<Self> {
        Self::for_worker(data, sampler, augment, 0)
    }

    /// Independent stream for worker `worker` under the same master seed.
    pub fn for_worker(data: &'a Dataset, sampler: SamplerConfig, augment: AugmentConfig, worker: u64) -> Result<Self> {
        augment.validate()?;
        if !(0.0..=1.0).contains(&sampler.wide_p) {
            return Err(Error::Config(format!("wide_p {} outside [0, 1]", sampler.wide_p)));
        }
        if data.n_beats() == 0 {
            return Err(Error::Dataset("dataset contains no annotated beats".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ augment.seed.rotate_left(32));
        rng.set_stream(worker);
        Ok(Self { data, sampler, augment, rng, warned_no_wide: false })
    }

    fn pick_beat(&mut self) -> (usize, usize, BeatClass) {
        let wide = self.data.wide_beats();
        let narrow = self.data.narrow_beats();
        if wide.is_empty() && !self.warned_no_wide {
            log::warn!("dataset has no wide beats; sampling narrow beats only");
            self.warned_no_wide = true;
        }
        let want_wide = self.rng.random::<f64>() < self.sampler.wide_p;
        let use_wide = (want_wide && !wide.is_empty()) || narrow.is_empty();
        let pool = if use_wide { wide } else { narrow };
        let (r, b) = pool[self.rng.random_range(0..pool.len())];
        (r, b, if use_wide { BeatClass::Wide } else { BeatClass::Narrow })
    }

    pub fn sample(&mut self, kind: WindowKind) -> Sample {
        let (r, b, class) = self.pick_beat();
        let item = &self.data.items[r];
        let fs = item.record.fs;
        let pos = item.annotation.positions[b];
        let (mut window, mut positions, anchor) = match kind {
            WindowKind::Segmentation => {
                let len = (self.sampler.window_len_s * fs).round() as usize;
                let n = item.record.n_samples();
                let start = if n >= len {
                    let offset = self.rng.random_range(0..len);
                    (pos as isize - offset as isize).clamp(0, (n - len) as isize)
                } else {
                    0
                };
                let end = start + len as isize;
                let inside: Vec<usize> = item
                    .annotation
                    .positions
                    .iter()
                    .filter(|&&p| (p as isize) >= start && (p as isize) < end)
                    .map(|&p| (p as isize - start) as usize)
                    .collect();
                (extract_span(&item.record, start, len), inside, 0.0)
            }
            WindowKind::Classification => {
                let len = (self.sampler.classification_window_s * fs).round() as usize;
                (extract_centered(&item.record, pos, len), vec![len / 2], (len / 2) as f64)
            }
        };

        let aug = &self.augment;
        channel_dropout(&mut window, aug.channel_dropout_p, aug.dropout_noise_std, &mut self.rng);
        add_noise(&mut window, aug.gaussian_noise_std, &mut self.rng);
        let f = uniform(aug.resample_range, &mut self.rng);
        if f != 1.0 {
            resample_by(&mut window, &mut positions, f, anchor);
        }
        random_scale(&mut window, aug.scale_range, &mut self.rng);

        let target = match kind {
            WindowKind::Segmentation => {
                let len = window[0].len();
                Target::Mask(beat_mask(len, &positions, mask_half_width(fs)))
            }
            WindowKind::Classification => Target::Label(if class.is_wide() { 1.0 } else { 0.0 }),
        };
        Sample { window, positions, target, anchor_class: class }
    }

    pub fn batch(&mut self, kind: WindowKind, size: usize) -> Vec<Sample> {
        (0..size).map(|_| self.sample(kind)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledRecord;
    use crate::signal_io::{BeatAnnotation, EcgRecord};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    fn two_channel(n: usize) -> Window {
        vec![(0..n).map(|i| (i as f64).sin()).collect(), (0..n).map(|i| (i as f64).cos()).collect()]
    }

    fn toy_dataset(wide_every: usize) -> Dataset {
        let n = 125 * 60;
        let positions: Vec<usize> = (0..60).map(|k| 62 + 125 * k).collect();
        let labels =
            (0..60).map(|k| if wide_every > 0 && k % wide_every == 0 { BeatClass::Wide } else { BeatClass::Narrow }).collect();
        let ch: Vec<f32> = (0..n).map(|i| ((i % 125) as f32 / 10.0).sin()).collect();
        let rec = EcgRecord::new("toy", 125.0, vec![ch.clone(), ch]).unwrap();
        let ann = BeatAnnotation::new(positions, labels, 125.0).unwrap();
        Dataset::new(vec![LabeledRecord::new(rec, ann).unwrap()])
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let w0 = two_channel(50);
        let mut w = w0.clone();
        let mut r = rng();
        for _ in 0..100 {
            assert_eq!(channel_dropout(&mut w, 0.0, 1.0, &mut r), None);
        }
        assert_eq!(w, w0);
    }

    #[test]
    fn dropout_p_one_zeroes_one_channel() {
        let mut r = rng();
        for _ in 0..50 {
            let mut w = two_channel(50);
            let c = channel_dropout(&mut w, 1.0, 0.0, &mut r).unwrap();
            assert!(w[c].iter().all(|&v| v == 0.0));
            assert!(w[1 - c].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn dropout_single_channel_noop() {
        let mut w = vec![vec![1.0; 10]];
        assert_eq!(channel_dropout(&mut w, 1.0, 1.0, &mut rng()), None);
        assert_eq!(w, vec![vec![1.0; 10]]);
    }

    #[test]
    fn zero_noise_is_identity() {
        let w0 = two_channel(20);
        let mut w = w0.clone();
        add_noise(&mut w, 0.0, &mut rng());
        assert_eq!(w, w0);
    }

    #[test]
    fn noise_statistics() {
        let n = 1_000_000;
        let mut w = vec![vec![0.0; n]];
        add_noise(&mut w, 0.1, &mut rng());
        let mean = w[0].iter().sum::<f64>() / n as f64;
        let std = (w[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((0.099..=0.101).contains(&std), "std {std}");
        assert!(mean.abs() <= 0.001, "mean {mean}");
    }

    #[test]
    fn resample_identity() {
        let w0 = two_channel(64);
        let mut w = w0.clone();
        let mut pos = vec![3, 40];
        resample_by(&mut w, &mut pos, 1.0, 0.0);
        assert_eq!(w, w0);
        assert_eq!(pos, vec![3, 40]);
    }

    #[test]
    fn resample_doubles_impulse_position() {
        let mut w = vec![vec![0.0; 500]];
        w[0][100] = 1.0;
        let mut pos = vec![100];
        resample_by(&mut w, &mut pos, 2.0, 0.0);
        let arg = (0..500).max_by(|&a, &b| w[0][a].total_cmp(&w[0][b])).unwrap();
        assert_eq!(arg, 200);
        assert_eq!(pos, vec![200]);
        assert_eq!(w[0].len(), 500);
    }

    #[test]
    fn resample_positions_track_peaks() {
        let mut r = rng();
        for _ in 0..200 {
            let n = 400;
            let p = r.random_range(20..200);
            let mut w = vec![(0..n).map(|i| (-0.5 * ((i as f64 - p as f64) / 3.0).powi(2)).exp()).collect()];
            let mut pos = vec![p];
            random_resample(&mut w, &mut pos, [0.7, 1.3], &mut r);
            let arg = (0..n).max_by(|&a, &b| w[0][a].total_cmp(&w[0][b])).unwrap();
            assert!((arg as i64 - pos[0] as i64).abs() <= 2);
        }
    }

    #[test]
    fn scale_examples() {
        let mut w = vec![vec![2.0, 4.0]];
        scale_by(&mut w, &[1.0]);
        assert_eq!(w, vec![vec![2.0, 4.0]]);
        scale_by(&mut w, &[0.5]);
        assert_eq!(w, vec![vec![1.0, 2.0]]);
    }

    #[test]
    fn scale_factor_mean() {
        let mut r = rng();
        let mut sum = 0.0;
        let draws = 100_000;
        for _ in 0..draws {
            let mut w = vec![vec![1.0]];
            sum += random_scale(&mut w, [0.5, 1.5], &mut r)[0];
        }
        let mean = sum / draws as f64;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
    }

    #[test]
    fn mask_width() {
        let m = beat_mask(100, &[50], 6);
        assert_eq!(m.iter().sum::<f64>(), 13.0);
        assert_eq!(m[44], 1.0);
        assert_eq!(m[43], 0.0);
        let edge = beat_mask(100, &[2, 98], 6);
        assert_eq!(edge.iter().sum::<f64>(), (9 + 8) as f64);
    }

    #[test]
    fn wide_p_one_samples_only_wide() {
        let ds = toy_dataset(4);
        let sc = SamplerConfig { wide_p: 1.0, window_len_s: 10.0, ..Default::default() };
        let mut s = WindowSampler::new(&ds, sc, AugmentConfig::identity()).unwrap();
        for _ in 0..200 {
            assert_eq!(s.sample(WindowKind::Classification).anchor_class, BeatClass::Wide);
        }
    }

    #[test]
    fn no_wide_beats_falls_back_to_narrow() {
        let ds = toy_dataset(0);
        let sc = SamplerConfig { wide_p: 1.0, window_len_s: 10.0, ..Default::default() };
        let mut s = WindowSampler::new(&ds, sc, AugmentConfig::identity()).unwrap();
        assert_eq!(s.sample(WindowKind::Classification).target, Target::Label(0.0));
    }

    #[test]
    fn segmentation_mask_marks_in_window_beats() {
        let ds = toy_dataset(3);
        let sc = SamplerConfig { window_len_s: 10.0, ..Default::default() };
        let mut s = WindowSampler::new(&ds, sc, AugmentConfig::identity()).unwrap();
        for _ in 0..50 {
            let smp = s.sample(WindowKind::Segmentation);
            let Target::Mask(m) = &smp.target else { panic!() };
            assert_eq!(m.len(), 1250);
            assert_eq!(smp.window.len(), 2);
            let want = beat_mask(1250, &smp.positions, 6);
            assert_eq!(m, &want);
            for (i, &v) in m.iter().enumerate() {
                let near = smp.positions.iter().any(|&p| (p as i64 - i as i64).abs() <= 6);
                assert_eq!(v == 1.0, near);
            }
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let ds = toy_dataset(3);
        let sc = SamplerConfig { window_len_s: 10.0, seed: 9, ..Default::default() };
        let a = WindowSampler::new(&ds, sc.clone(), AugmentConfig::default()).unwrap().batch(WindowKind::Segmentation, 4);
        let b = WindowSampler::new(&ds, sc.clone(), AugmentConfig::default()).unwrap().batch(WindowKind::Segmentation, 4);
        assert_eq!(a, b);
        let c = WindowSampler::for_worker(&ds, sc, AugmentConfig::default(), 1).unwrap().batch(WindowKind::Segmentation, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn augmentation_keeps_shape() {
        let ds = toy_dataset(2);
        let sc = SamplerConfig { window_len_s: 10.0, ..Default::default() };
        let mut s = WindowSampler::new(&ds, sc, AugmentConfig::default()).unwrap();
        for _ in 0..50 {
            let c = s.sample(WindowKind::Classification);
            assert_eq!(c.window.len(), 2);
            assert!(c.window.iter().all(|ch| ch.len() == 250));
        }
    }
}
