//! Classical QRS detector: band-pass, derivative, squaring, moving-window
//! integration and adaptive dual thresholds with search-back.
//!
//! Constants follow Pan & Tompkins (1985): signal/noise peak estimates are
//! updated with weight 1/8 (1/4 for search-back peaks), the primary
//! threshold sits a quarter of the way from noise to signal level, the
//! secondary one at half the primary, search-back triggers after 166 % of
//! the average RR, and a candidate within 360 ms of the last beat whose
//! slope is under half of that beat's is taken as a T wave.

use serde::{Deserialize, Serialize};

use crate::preprocess::{design_bandpass, fir_zero_phase, mean_filter};
use crate::signal_io::{BeatAnnotation, EcgRecord};

use super::peaks::{local_maxima, suppress_non_maxima};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanTompkinsConfig {
    pub channel: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub integration_ms: f64,
    pub refractory_ms: f64,
    pub t_wave_ms: f64,
    pub learning_s: f64,
}

impl Default for PanTompkinsConfig {
    fn default() -> Self {
        Self {
            channel: 0,
            low_hz: 5.0,
            high_hz: 15.0,
            integration_ms: 150.0,
            refractory_ms: 200.0,
            t_wave_ms: 360.0,
            learning_s: 2.0,
        }
    }
}

struct Cand {
    mwi_loc: usize,
    pi: f64,
    r_loc: usize,
    pf: f64,
    slope: f64,
}

fn argmax_abs(x: &[f64], lo: usize, hi: usize) -> (usize, f64) {
    let mut best = (lo, x[lo].abs());
    for (i, v) in x.iter().enumerate().take(hi).skip(lo) {
        if v.abs() > best.1 {
            best = (i, v.abs());
        }
    }
    best
}

/// R-peak sample indices in `x`.
pub fn pan_tompkins(x: &[f64], fs: f64, cfg: &PanTompkinsConfig) -> Vec<usize> {
    let n = x.len();
    if n < 5 {
        return Vec::new();
    }
    let ms = |v: f64| ((v * 1e-3 * fs).round() as usize).max(1);
    let taps = ((fs.round() as usize) | 1).max(3);
    let bp = fir_zero_phase(x, &design_bandpass(fs, cfg.low_hz, cfg.high_hz, taps));
    // five-point derivative, centred
    let at = |i: isize| bp[i.clamp(0, n as isize - 1) as usize];
    let deriv: Vec<f64> = (0..n as isize).map(|i| (-at(i - 2) - 2.0 * at(i - 1) + 2.0 * at(i + 1) + at(i + 2)) / 8.0).collect();
    let sq: Vec<f64> = deriv.iter().map(|v| v * v).collect();
    let mwi = mean_filter(&sq, ms(cfg.integration_ms));

    let refractory = ms(cfg.refractory_ms);
    let half_qrs = ms(75.0);
    let peaks = suppress_non_maxima(&mwi, &local_maxima(&mwi, 0.0), refractory);
    if peaks.is_empty() {
        return Vec::new();
    }
    let cands: Vec<Cand> = peaks
        .iter()
        .map(|&p| {
            let lo = p.saturating_sub(half_qrs);
            let hi = (p + half_qrs + 1).min(n);
            let (r_loc, pf) = argmax_abs(&bp, lo, hi);
            let (_, slope) = argmax_abs(&deriv, lo, hi);
            Cand { mwi_loc: p, pi: mwi[p], r_loc, pf, slope }
        })
        .collect();

    let learn = ((cfg.learning_s * fs) as usize).clamp(1, n);
    let max_i = mwi[..learn].iter().cloned().fold(0.0, f64::max);
    let mean_i = mwi[..learn].iter().sum::<f64>() / learn as f64;
    let max_f = bp[..learn].iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mean_f = bp[..learn].iter().map(|v| v.abs()).sum::<f64>() / learn as f64;
    let (mut spki, mut npki) = (0.25 * max_i, 0.5 * mean_i);
    let (mut spkf, mut npkf) = (0.25 * max_f, 0.5 * mean_f);

    let mut beats: Vec<usize> = Vec::new(); // indices into cands
    let mut rr_recent: Vec<f64> = Vec::new();
    let mut rr_selected: Vec<f64> = Vec::new();
    let mut noise_since: Vec<usize> = Vec::new();

    let thresholds = |spki: f64, npki: f64, spkf: f64, npkf: f64| {
        let ti1 = npki + 0.25 * (spki - npki);
        let tf1 = npkf + 0.25 * (spkf - npkf);
        (ti1, 0.5 * ti1, tf1, 0.5 * tf1)
    };

    let accept =
        |k: usize, beats: &mut Vec<usize>, rr_recent: &mut Vec<f64>, rr_selected: &mut Vec<f64>, noise_since: &mut Vec<usize>| {
            if let Some(&last) = beats.last() {
                let rr = (cands[k].mwi_loc - cands[last].mwi_loc) as f64;
                let avg2 = if rr_selected.is_empty() { rr } else { rr_selected.iter().sum::<f64>() / rr_selected.len() as f64 };
                rr_recent.push(rr);
                if rr_recent.len() > 8 {
                    rr_recent.remove(0);
                }
                if rr_selected.is_empty() || (0.92 * avg2..=1.16 * avg2).contains(&rr) {
                    rr_selected.push(rr);
                    if rr_selected.len() > 8 {
                        rr_selected.remove(0);
                    }
                }
            }
            beats.push(k);
            noise_since.clear();
        };

    for k in 0..cands.len() {
        // search-back over noise peaks when a beat seems to have been missed
        if let Some(&last) = beats.last() {
            let avg = if !rr_selected.is_empty() {
                Some(rr_selected.iter().sum::<f64>() / rr_selected.len() as f64)
            } else if !rr_recent.is_empty() {
                Some(rr_recent.iter().sum::<f64>() / rr_recent.len() as f64)
            } else {
                None
            };
            if let Some(avg) = avg {
                if (cands[k].mwi_loc - cands[last].mwi_loc) as f64 > 1.66 * avg {
                    let (_, ti2, _, tf2) = thresholds(spki, npki, spkf, npkf);
                    let best = noise_since
                        .iter()
                        .copied()
                        .filter(|&j| {
                            cands[j].mwi_loc - cands[last].mwi_loc >= refractory && cands[j].pi > ti2 && cands[j].pf > tf2
                        })
                        .max_by(|&a, &b| cands[a].pi.total_cmp(&cands[b].pi));
                    if let Some(j) = best {
                        spki = 0.25 * cands[j].pi + 0.75 * spki;
                        spkf = 0.25 * cands[j].pf + 0.75 * spkf;
                        accept(j, &mut beats, &mut rr_recent, &mut rr_selected, &mut noise_since);
                    }
                }
            }
        }
        let (ti1, _, tf1, _) = thresholds(spki, npki, spkf, npkf);
        let c = &cands[k];
        let mut is_qrs = c.pi > ti1 && c.pf > tf1;
        if is_qrs {
            if let Some(&last) = beats.last() {
                let gap = c.mwi_loc - cands[last].mwi_loc;
                if gap < ms(cfg.t_wave_ms) && c.slope < 0.5 * cands[last].slope {
                    is_qrs = false;
                }
            }
        }
        if is_qrs {
            spki = 0.125 * c.pi + 0.875 * spki;
            spkf = 0.125 * c.pf + 0.875 * spkf;
            accept(k, &mut beats, &mut rr_recent, &mut rr_selected, &mut noise_since);
        } else {
            npki = 0.125 * c.pi + 0.875 * npki;
            npkf = 0.125 * c.pf + 0.875 * npkf;
            noise_since.push(k);
        }
    }

    // R locations may move by up to 75 ms; re-impose the refractory period
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut rs: Vec<(usize, f64)> = beats.iter().map(|&k| (cands[k].r_loc, cands[k].pf)).collect();
    rs.sort_by_key(|r| r.0);
    for (r, pf) in rs {
        match out.last_mut() {
            Some(last) if r - last.0 < refractory => {
                if pf > last.1 {
                    *last = (r, pf);
                }
            }
            _ => out.push((r, pf)),
        }
    }
    out.into_iter().map(|r| r.0).collect()
}

/// Runs the detector on the configured channel of `record`.
pub fn detect_pan_tompkins(record: &EcgRecord, cfg: &PanTompkinsConfig) -> BeatAnnotation {
    let ch = cfg.channel.min(record.n_channels().saturating_sub(1));
    let positions = if record.n_channels() == 0 { Vec::new() } else { pan_tompkins(&record.channel_f64(ch), record.fs, cfg) };
    BeatAnnotation::positions_only(positions, record.fs)
}
