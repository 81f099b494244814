//! Stage 1: beat positions from a per-sample segmentation network, plus the
//! Pan–Tompkins baseline.

pub mod model;
pub mod pan_tompkins;
pub mod peaks;

pub use model::{BlockSpec, SegModel, SegModelConfig, SEG_KIND};
pub use pan_tompkins::{detect_pan_tompkins, pan_tompkins, PanTompkinsConfig};
pub use peaks::{extract_peaks, PeakConfig};

use crate::augment::{Target, WindowKind};
use crate::dataset::{extract_span, Dataset, LabeledRecord};
use crate::error::{Error, Result};
use crate::eval::{match_beats, Counts, MatchConfig};
use crate::nn::Tensor;
use crate::signal_io::{BeatAnnotation, EcgRecord};
use crate::train::{fit, TrainConfig, TrainLog, Validation};

/// Windows processed per forward pass during inference.
const INFER_BATCH: usize = 4;

/// Window start offsets covering `n` samples with the given overlap.
pub fn window_starts(n: usize, win: usize, overlap: f64) -> Vec<usize> {
    if n <= win {
        return vec![0];
    }
    let hop = (((1.0 - overlap) * win as f64).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|&s| s + win < n).collect();
    starts.push(n - win);
    starts.dedup();
    starts
}

fn check_record(model: &SegModel, record: &EcgRecord) -> Result<()> {
    if record.fs != model.config.fs {
        return Err(Error::Model(format!(
            "segmentation model expects {} Hz, record {} is at {} Hz",
            model.config.fs, record.record_id, record.fs
        )));
    }
    if record.n_channels() != model.config.n_channels {
        return Err(Error::Model(format!(
            "segmentation model expects {} channels, record {} has {}",
            model.config.n_channels,
            record.record_id,
            record.n_channels()
        )));
    }
    Ok(())
}

/// Per-sample beat probability over the whole record; overlapping windows
/// are averaged.
pub fn probability_trace(model: &SegModel, record: &EcgRecord, peak: &PeakConfig) -> Result<Vec<f64>> {
    check_record(model, record)?;
    let n = record.n_samples();
    let win = model.config.window_samples();
    let starts = window_starts(n, win, peak.window_overlap);
    let mut sum = vec![0.0; n];
    let mut count = vec![0u32; n];
    for group in starts.chunks(INFER_BATCH) {
        let windows: Vec<Vec<Vec<f64>>> = group.iter().map(|&s| extract_span(record, s as isize, win)).collect();
        let refs: Vec<&[Vec<f64>]> = windows.iter().map(|w| w.as_slice()).collect();
        let probs = model.predict(Tensor::from_windows(&refs)?)?;
        for (k, &s) in group.iter().enumerate() {
            let row = &probs.data()[k * win..(k + 1) * win];
            let end = (s + win).min(n);
            for i in s..end {
                sum[i] += row[i - s];
                count[i] += 1;
            }
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / f64::from(c) } else { 0.0 }).collect())
}

/// Beat positions of a preprocessed record.
pub fn detect_beats(model: &SegModel, record: &EcgRecord, peak: &PeakConfig) -> Result<BeatAnnotation> {
    peak.validate()?;
    let trace = probability_trace(model, record, peak)?;
    Ok(BeatAnnotation::positions_only(extract_peaks(&trace, record.fs, peak), record.fs))
}

/// Pooled detection counts of `model` over annotated records.
pub fn detection_counts(
    model: &SegModel,
    records: &[LabeledRecord],
    peak: &PeakConfig,
    matching: &MatchConfig,
) -> Result<Counts> {
    let mut total = Counts::default();
    for r in records {
        let det = detect_beats(model, &r.record, peak)?;
        total.add(&match_beats(&det.positions, &r.annotation.positions, matching, r.record.fs).counts);
    }
    Ok(total)
}

/// F1 of detection; 0 when nothing is predicted or expected.
pub fn f1(c: &Counts) -> f64 {
    let d = 2 * c.tp + c.fp + c.fn_;
    if d == 0 {
        0.0
    } else {
        2.0 * c.tp as f64 / d as f64
    }
}

/// Trains from a fresh model (or `init`) on `train`, selecting weights by
/// detection F1 on `valid`.
pub fn train_segmentation(
    train: &Dataset,
    valid: &[LabeledRecord],
    config: &SegModelConfig,
    train_cfg: &TrainConfig,
    peak: &PeakConfig,
    matching: &MatchConfig,
    init: Option<SegModel>,
) -> Result<(SegModel, TrainLog)> {
    if train.n_beats() == 0 {
        return Err(Error::Dataset("segmentation training needs annotated beats".into()));
    }
    if train.fs() != Some(config.fs) {
        return Err(Error::Dataset(format!("training data at {:?} Hz, model expects {} Hz", train.fs(), config.fs)));
    }
    let mut model = match init {
        Some(m) => m,
        None => SegModel::new(config.clone(), train_cfg.seed)?,
    };
    let mut tc = train_cfg.clone();
    tc.sampler.window_len_s = model.config.window_len_s;
    let loss_kind = model.config.loss;
    let template = model.clone();
    let loss_fn = |g: &mut crate::nn::Graph, pv: &[crate::nn::Var], batch: &[crate::augment::Sample]| {
        let refs: Vec<&[Vec<f64>]> = batch.iter().map(|s| s.window.as_slice()).collect();
        let x = g.input(Tensor::from_windows(&refs)?);
        let mut y = Vec::new();
        for s in batch {
            match &s.target {
                Target::Mask(m) => y.extend_from_slice(m),
                Target::Label(_) => return Err(Error::Model("segmentation batch without masks".into())),
            }
        }
        let y = Tensor::new(vec![batch.len(), y.len() / batch.len().max(1)], y)?;
        let p = template.forward(g, pv, x)?;
        loss_kind.apply(g, p, &y)
    };
    let validate = |params: &crate::nn::ParamSet, step: usize| -> Result<Validation> {
        let m = template.with_params(params.clone())?;
        let c = detection_counts(&m, valid, peak, matching)?;
        let met = crate::eval::detection_metrics(&c);
        Ok(Validation { step, score: f1(&c), se: met.se, plus_p: met.plus_p })
    };
    let log = fit(
        &mut model.params,
        &tc,
        WindowKind::Segmentation,
        train,
        &loss_fn,
        if valid.is_empty() { None } else { Some(&validate) },
    )?;
    Ok((model, log))
}
