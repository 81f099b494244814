//! The three stages chained: preprocess, detect, classify, stack.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cls::{classify_beats, label_of, BeatDescriptor, ClsModel};
use crate::config::PipelineConfig;
use crate::dataset::LabeledRecord;
use crate::error::{Error, Result};
use crate::eval::{evaluate_record, match_beats, EvalReport};
use crate::gbdt::{
    build_features, feature_names, gbdt_predict, train_gbdt, FeatureConfig, FeatureMatrix, GbdtModel, DEFAULT_RR_MS,
};
use crate::nn::load_checkpoint;
use crate::preprocess::{median, preprocess_record};
use crate::seg::{detect_beats, SegModel};
use crate::signal_io::{read_annotations, read_record, write_annotations, BeatAnnotation, BeatClass, EcgRecord};

/// Label threshold on the stacked probability.
pub const GBDT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Models {
    pub seg: SegModel,
    pub cls: ClsModel,
    pub gbdt: Option<GbdtModel>,
}

impl Models {
    pub fn new(seg: SegModel, cls: ClsModel, gbdt: Option<GbdtModel>) -> Result<Self> {
        if seg.config.fs != cls.config.fs || seg.config.n_channels != cls.config.n_channels {
            return Err(Error::Model(format!(
                "segmentation model ({} Hz, {} channels) and classifier ({} Hz, {} channels) disagree",
                seg.config.fs, seg.config.n_channels, cls.config.fs, cls.config.n_channels
            )));
        }
        if let Some(g) = &gbdt {
            if g.feature_names != feature_names(cls.config.embedding_dim()) {
                return Err(Error::Model("GBDT features do not match the classifier's embedding size".into()));
            }
        }
        Ok(Self { seg, cls, gbdt })
    }

    pub fn load(seg: impl AsRef<Path>, cls: impl AsRef<Path>, gbdt: Option<&Path>) -> Result<Self> {
        let seg = SegModel::from_checkpoint(&load_checkpoint(seg)?)?;
        let cls = ClsModel::from_checkpoint(&load_checkpoint(cls)?)?;
        let gbdt = gbdt.map(GbdtModel::load).transpose()?;
        Self::new(seg, cls, gbdt)
    }

    pub fn fs(&self) -> f64 {
        self.seg.config.fs
    }
}

/// Everything the pipeline derives from one record; positions refer to the
/// preprocessed rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPrediction {
    pub record_id: String,
    pub descriptors: Vec<BeatDescriptor>,
    /// Stage-2 labels.
    pub nn: BeatAnnotation,
    /// Stage-3 probabilities and labels, when a GBDT model is present.
    pub gbdt_prob: Option<Vec<f64>>,
    pub stacked: Option<BeatAnnotation>,
}

impl RecordPrediction {
    pub fn final_annotation(&self) -> &BeatAnnotation {
        self.stacked.as_ref().unwrap_or(&self.nn)
    }
}

fn labelled(positions: &[usize], labels: Vec<BeatClass>, fs: f64) -> BeatAnnotation {
    let mut a = BeatAnnotation::positions_only(positions.to_vec(), fs);
    a.labels = labels;
    a
}

fn feature_config(cfg: &FeatureConfig, gbdt: &GbdtModel) -> FeatureConfig {
    FeatureConfig { rr_default_ms: gbdt.rr_default_ms, ..cfg.clone() }
}

/// Runs stages 1 to 3 on a record that is already preprocessed.
pub fn predict_processed(models: &Models, record: &EcgRecord, cfg: &PipelineConfig) -> Result<RecordPrediction> {
    let det = detect_beats(&models.seg, record, &cfg.peaks)?;
    let descriptors = classify_beats(&models.cls, record, &det.positions)?;
    let nn = labelled(&det.positions, descriptors.iter().map(|d| label_of(d.prob_wide)).collect(), record.fs);
    let (gbdt_prob, stacked) = match &models.gbdt {
        Some(g) if !descriptors.is_empty() => {
            let x = build_features(&descriptors, record.fs, &feature_config(&cfg.features, g))?;
            let p = gbdt_predict(g, &x)?;
            let labels = p.iter().map(|&v| if v >= GBDT_THRESHOLD { BeatClass::Wide } else { BeatClass::Narrow }).collect();
            let ann = labelled(&det.positions, labels, record.fs);
            (Some(p), Some(ann))
        }
        Some(_) => (Some(Vec::new()), Some(nn.clone())),
        None => (None, None),
    };
    Ok(RecordPrediction { record_id: record.record_id.clone(), descriptors, nn, gbdt_prob, stacked })
}

/// Preprocesses a raw record, checking its rate against the models.
pub fn predict_raw(models: &Models, raw: &EcgRecord, cfg: &PipelineConfig) -> Result<RecordPrediction> {
    let out_fs = cfg.preprocess.output_fs(raw.fs);
    if out_fs != models.fs() {
        return Err(Error::Model(format!(
            "record {} at {} Hz preprocesses to {out_fs} Hz, models expect {} Hz",
            raw.record_id,
            raw.fs,
            models.fs()
        )));
    }
    predict_processed(models, &preprocess_record(raw, &cfg.preprocess)?, cfg)
}

/// Feature rows and labels for stacking: detected beats take the label of
/// their matched true beat and unmatched detections count as narrow.
pub fn stacker_rows(
    seg: &SegModel,
    cls: &ClsModel,
    records: &[LabeledRecord],
    cfg: &PipelineConfig,
    rr_default_ms: f64,
) -> Result<(FeatureMatrix, Vec<f64>)> {
    let mut x = FeatureMatrix::empty(feature_names(cls.config.embedding_dim()));
    let mut y = Vec::new();
    let fc = FeatureConfig { rr_default_ms, ..cfg.features.clone() };
    for r in records {
        let det = detect_beats(seg, &r.record, &cfg.peaks)?;
        if det.is_empty() {
            continue;
        }
        let desc = classify_beats(cls, &r.record, &det.positions)?;
        x.append(&build_features(&desc, r.record.fs, &fc)?)?;
        let m = match_beats(&det.positions, &r.annotation.positions, &cfg.matching, r.record.fs);
        for t in m.truth_of_pred(det.len()) {
            y.push(f64::from(u8::from(t.is_some_and(|t| r.annotation.labels[t].is_wide()))));
        }
    }
    Ok((x, y))
}

/// Median RR (ms) over true annotations, or the fixed default when no
/// record has two beats.
pub fn corpus_median_rr(records: &[LabeledRecord]) -> f64 {
    let rr: Vec<f64> = records
        .iter()
        .flat_map(|r| r.annotation.positions.windows(2).map(move |w| (w[1] - w[0]) as f64 / r.record.fs * 1000.0))
        .collect();
    if rr.is_empty() {
        DEFAULT_RR_MS
    } else {
        median(&rr)
    }
}

/// Trains the stage-3 model on records the networks have not seen.
pub fn train_stacker(
    seg: &SegModel,
    cls: &ClsModel,
    train: &[LabeledRecord],
    valid: &[LabeledRecord],
    cfg: &PipelineConfig,
) -> Result<GbdtModel> {
    let rr_default = corpus_median_rr(train);
    let (x, y) = stacker_rows(seg, cls, train, cfg, rr_default)?;
    let (xv, yv) = stacker_rows(seg, cls, valid, cfg, rr_default)?;
    let mut model = train_gbdt(&x, &y, &xv, &yv, &cfg.gbdt)?;
    model.rr_default_ms = rr_default;
    Ok(model)
}

/// Reports for stage-2 labels and, when available, stage-3 labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReports {
    pub nn: EvalReport,
    pub stacked: Option<EvalReport>,
}

/// Evaluates on preprocessed annotated records.
pub fn evaluate_corpus(models: &Models, records: &[LabeledRecord], cfg: &PipelineConfig) -> Result<StageReports> {
    let mut nn = Vec::new();
    let mut st = Vec::new();
    for r in records {
        let p = predict_processed(models, &r.record, cfg)?;
        nn.push(evaluate_record(&r.record.record_id, &p.nn, &r.annotation, &cfg.matching)?);
        if let Some(s) = &p.stacked {
            st.push(evaluate_record(&r.record.record_id, s, &r.annotation, &cfg.matching)?);
        }
    }
    Ok(StageReports {
        nn: EvalReport::from_records(nn, &cfg.matching),
        stacked: models.gbdt.as_ref().map(|_| EvalReport::from_records(st, &cfg.matching)),
    })
}

/// Reads a record, writes the final annotation (at the record's own rate)
/// to `out_path`, and evaluates against `truth_path` when given.
pub fn run_pipeline(
    record_path: impl AsRef<Path>,
    models: &Models,
    cfg: &PipelineConfig,
    out_path: impl AsRef<Path>,
    truth_path: Option<&Path>,
) -> Result<(BeatAnnotation, Option<EvalReport>)> {
    let raw = read_record(record_path)?;
    let pred = predict_raw(models, &raw, cfg)?;
    let ann = pred.final_annotation().rescaled(raw.fs);
    write_annotations(&ann, out_path)?;
    let report = match truth_path {
        Some(t) => {
            let truth = LabeledRecord::new(raw.clone(), read_annotations(t, raw.fs)?)?.preprocessed(&cfg.preprocess)?;
            let r = evaluate_record(&raw.record_id, pred.final_annotation(), &truth.annotation, &cfg.matching)?;
            Some(EvalReport::from_records(vec![r], &cfg.matching))
        }
        None => None,
    };
    Ok((ann, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cls::ClsModelConfig;
    use crate::seg::SegModelConfig;

    fn untrained() -> Models {
        Models::new(SegModel::new(SegModelConfig::desk(), 1).unwrap(), ClsModel::new(ClsModelConfig::desk(), 2).unwrap(), None)
            .unwrap()
    }

    #[test]
    fn rate_mismatch_is_an_error() {
        let m = untrained();
        let raw = EcgRecord::new("r", 500.0, vec![vec![0.0; 5000], vec![0.0; 5000]]).unwrap();
        assert!(predict_raw(&m, &raw, &PipelineConfig::desk()).is_err());
    }

    #[test]
    fn mismatched_models_rejected() {
        let cls = ClsModel::new(ClsModelConfig { fs: 250.0, ..ClsModelConfig::desk() }, 0).unwrap();
        assert!(Models::new(SegModel::new(SegModelConfig::desk(), 0).unwrap(), cls, None).is_err());
    }

    #[test]
    fn median_rr_of_corpus() {
        let rec = EcgRecord::new("r", 125.0, vec![vec![0.0; 1000]]).unwrap();
        let ann = BeatAnnotation::new(vec![0, 100, 225, 325], vec![BeatClass::Narrow; 4], 125.0).unwrap();
        assert_eq!(corpus_median_rr(&[LabeledRecord::new(rec, ann).unwrap()]), 800.0);
        assert_eq!(corpus_median_rr(&[]), DEFAULT_RR_MS);
    }
}
