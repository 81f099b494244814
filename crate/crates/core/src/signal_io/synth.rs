//! Synthetic two-lead ECG with exact ground-truth beat annotations.
//!
//! Every beat is a sum of Gaussian P/Q/R/S/T components. Wide beats drop
//! the P wave, use a QRS duration of at least 120 ms and carry a discordant
//! T wave; narrow beats stay at or below 90 ms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotation::{BeatAnnotation, BeatClass};
use super::record::EcgRecord;
use crate::error::{Error, Result};

pub const SYNTH_FS: f64 = 250.0;

/// Narrow QRS durations are drawn at or below this bound (seconds).
pub const NARROW_QRS_MAX_S: f64 = 0.090;
/// Wide QRS durations are drawn at or above this bound (seconds).
pub const WIDE_QRS_MIN_S: f64 = 0.120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutSegment {
    pub channel: usize,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub mean_hr_bpm: f64,
    /// RR intervals vary by `±hr_jitter` as a fraction of the mean.
    pub hr_jitter: f64,
    pub wide_fraction: f64,
    pub noise_std_mv: f64,
    pub dropout_segments: Vec<DropoutSegment>,
    pub seed: u64,
    pub n_channels: usize,
    /// Amplitude of a slow sinusoidal baseline drift.
    pub baseline_wander_mv: f64,
    pub record_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            mean_hr_bpm: 60.0,
            hr_jitter: 0.0,
            wide_fraction: 0.0,
            noise_std_mv: 0.0,
            dropout_segments: Vec::new(),
            seed: 0,
            n_channels: 2,
            baseline_wander_mv: 0.0,
            record_id: "synthetic".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !(self.mean_hr_bpm.is_finite() && self.mean_hr_bpm > 0.0) {
            return bad(format!("mean_hr_bpm must be positive, got {}", self.mean_hr_bpm));
        }
        if !(0.0..1.0).contains(&self.hr_jitter) {
            return bad(format!("hr_jitter must lie in [0, 1), got {}", self.hr_jitter));
        }
        if !(0.0..=1.0).contains(&self.wide_fraction) {
            return bad(format!("wide_fraction must lie in [0, 1], got {}", self.wide_fraction));
        }
        if !(self.noise_std_mv >= 0.0) || !(self.baseline_wander_mv >= 0.0) {
            return bad("noise and wander amplitudes must be non-negative".into());
        }
        if self.n_channels == 0 {
            return bad("n_channels must be at least 1".into());
        }
        for s in &self.dropout_segments {
            if s.channel >= self.n_channels {
                return bad(format!("dropout channel {} out of range", s.channel));
            }
            if !(0.0 <= s.start_s && s.start_s <= s.end_s && s.end_s <= self.duration_s) {
                return bad(format!("dropout segment {:.3}..{:.3} s outside the record", s.start_s, s.end_s));
            }
        }
        Ok(())
    }
}

struct Wave {
    offset_s: f64,
    sigma_s: f64,
    amp: f64,
}

fn beat_waves(class: BeatClass, qrs_s: f64) -> Vec<Wave> {
    match class {
        BeatClass::Narrow => vec![
            Wave { offset_s: -0.16, sigma_s: 0.025, amp: 0.15 },
            Wave { offset_s: -0.35 * qrs_s, sigma_s: qrs_s / 10.0, amp: -0.15 },
            Wave { offset_s: 0.0, sigma_s: qrs_s / 6.0, amp: 1.0 },
            Wave { offset_s: 0.35 * qrs_s, sigma_s: qrs_s / 10.0, amp: -0.25 },
            Wave { offset_s: 0.25, sigma_s: 0.04, amp: 0.3 },
        ],
        BeatClass::Wide => vec![
            Wave { offset_s: 0.0, sigma_s: qrs_s / 6.0, amp: 1.3 },
            Wave { offset_s: 0.35 * qrs_s, sigma_s: qrs_s / 8.0, amp: -0.4 },
            Wave { offset_s: 0.30, sigma_s: 0.06, amp: -0.45 },
        ],
    }
}

/// Half-width of the support each beat template is evaluated over.
const BEAT_SUPPORT_S: f64 = 0.5;

pub fn generate_synthetic(config: &SynthConfig) -> Result<(EcgRecord, BeatAnnotation)> {
    config.validate()?;
    let fs = SYNTH_FS;
    let n = (config.duration_s * fs).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let lead_gain: Vec<f64> =
        (0..config.n_channels).map(|c| if c == 0 { rng.random_range(0.8..1.2) } else { rng.random_range(0.4..0.9) }).collect();
    let wander_phase: Vec<f64> = (0..config.n_channels).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let narrow_base_s: f64 = rng.random_range(0.070..0.085);
    let width_jitter = Normal::new(0.0f64, 0.003).expect("valid normal");

    let mean_rr = 60.0 / config.mean_hr_bpm;
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    let mut widths = Vec::new();
    let mut t = 0.5 * mean_rr;
    while t < config.duration_s {
        let pos = (t * fs).round() as usize;
        if pos < n && positions.last().is_none_or(|&p| pos > p) {
            let class = if rng.random::<f64>() < config.wide_fraction { BeatClass::Wide } else { BeatClass::Narrow };
            let width = match class {
                BeatClass::Narrow => (narrow_base_s + width_jitter.sample(&mut rng)).clamp(0.060, NARROW_QRS_MAX_S),
                BeatClass::Wide => rng.random_range(WIDE_QRS_MIN_S..0.160),
            };
            positions.push(pos);
            labels.push(class);
            widths.push(width);
        }
        let u: f64 = if config.hr_jitter > 0.0 { rng.random_range(-1.0..=1.0) } else { 0.0 };
        t += mean_rr * (1.0 + config.hr_jitter * u);
    }

    let mut channels = vec![vec![0.0f64; n]; config.n_channels];
    let support = (BEAT_SUPPORT_S * fs).ceil() as isize;
    for ((&pos, &class), &width) in positions.iter().zip(&labels).zip(&widths) {
        for wave in beat_waves(class, width) {
            let centre = pos as f64 + wave.offset_s * fs;
            let sigma = wave.sigma_s * fs;
            let lo = (pos as isize - support).max(0) as usize;
            let hi = ((pos as isize + support + 1) as usize).min(n);
            for i in lo..hi {
                let z = (i as f64 - centre) / sigma;
                let v = wave.amp * (-0.5 * z * z).exp();
                for (c, ch) in channels.iter_mut().enumerate() {
                    ch[i] += lead_gain[c] * v;
                }
            }
        }
    }

    if config.baseline_wander_mv > 0.0 {
        for (c, ch) in channels.iter_mut().enumerate() {
            for (i, v) in ch.iter_mut().enumerate() {
                let tt = i as f64 / fs;
                *v += config.baseline_wander_mv * (std::f64::consts::TAU * 0.25 * tt + wander_phase[c]).sin();
            }
        }
    }

    if config.noise_std_mv > 0.0 {
        let noise = Normal::new(0.0, config.noise_std_mv).map_err(|e| Error::Config(e.to_string()))?;
        for ch in channels.iter_mut() {
            for v in ch.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }

    for seg in &config.dropout_segments {
        let a = ((seg.start_s * fs).round() as usize).min(n);
        let b = ((seg.end_s * fs).round() as usize).min(n);
        channels[seg.channel][a..b].fill(0.0);
    }

    let channels: Vec<Vec<f32>> = channels.into_iter().map(|c| c.into_iter().map(|v| v as f32).collect()).collect();
    let record = EcgRecord::new(config.record_id.clone(), fs, channels)?;
    let ann = BeatAnnotation::new(positions, labels, fs)?;
    Ok((record, ann))
}

/// Settings for a corpus of varied synthetic records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_records: usize,
    pub duration_s: f64,
    pub noise_std_mv: f64,
    pub wide_fraction: f64,
    /// Heart rates are drawn uniformly from this range (bpm).
    pub hr_range: [f64; 2],
    /// One flat-lined span of 10-20 % of the record on a random channel.
    pub dropout: bool,
    pub baseline_wander_mv: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_records: 20,
            duration_s: 600.0,
            noise_std_mv: 0.1,
            wide_fraction: 0.15,
            hr_range: [50.0, 100.0],
            dropout: true,
            baseline_wander_mv: 0.2,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

/// Per-record generator settings for `corpus`, drawn from its seed.
pub fn corpus_configs(corpus: &CorpusConfig) -> Vec<SynthConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.seed);
    (0..corpus.n_records)
        .map(|i| {
            let mean_hr_bpm = rng.random_range(corpus.hr_range[0]..=corpus.hr_range[1]);
            let hr_jitter = rng.random_range(0.02..0.15);
            let wander = corpus.baseline_wander_mv * rng.random::<f64>();
            let dropout_segments = if corpus.dropout {
                let len = corpus.duration_s * rng.random_range(0.1..0.2);
                let start = rng.random_range(0.0..corpus.duration_s - len);
                vec![DropoutSegment { channel: rng.random_range(0..2), start_s: start, end_s: start + len }]
            } else {
                Vec::new()
            };
            SynthConfig {
                duration_s: corpus.duration_s,
                mean_hr_bpm,
                hr_jitter,
                wide_fraction: corpus.wide_fraction,
                noise_std_mv: corpus.noise_std_mv,
                dropout_segments,
                seed: rng.random(),
                n_channels: 2,
                baseline_wander_mv: wander,
                record_id: format!("{}{:03}", corpus.id_prefix, i),
            }
        })
        .collect()
}

pub fn generate_corpus(corpus: &CorpusConfig) -> Result<Vec<(EcgRecord, BeatAnnotation)>> {
    corpus_configs(corpus).iter().map(generate_synthetic).collect()
}
