//! Stage 2: wide/narrow classification of beat-centred windows.
//!
//! Each channel has its own encoder; encoder outputs are averaged, passed
//! through one merge block and global-average pooled into the embedding
//! that stage 3 consumes. A dense layer maps the embedding to one logit.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{Target, WindowKind};
use crate::dataset::{extract_centered, Dataset, LabeledRecord};
use crate::error::{Error, Result};
use crate::eval::{detection_metrics, Counts};
use crate::nn::{sigmoid, Checkpoint, ConvBlock, Dense, Graph, LossKind, ParamSet, Tensor, Var};
use crate::seg::BlockSpec;
use crate::signal_io::{BeatClass, EcgRecord};
use crate::train::{fit, TrainConfig, TrainLog, Validation};

pub const CLS_KIND: &str = "cls";
const INFER_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClsModelConfig {
    pub window_len_s: f64,
    pub fs: f64,
    pub n_channels: usize,
    pub encoder_blocks: Vec<BlockSpec>,
    pub merge_channels: usize,
    pub merge_kernel: usize,
    /// Central fraction of the merged feature map that is averaged into the
    /// embedding; 1 pools the whole window.
    pub pool_fraction: f64,
    pub loss: LossKind,
}

impl Default for ClsModelConfig {
    fn default() -> Self {
        Self {
            window_len_s: 2.0,
            fs: 125.0,
            n_channels: 2,
            encoder_blocks: [16, 32, 64].iter().map(|&c| BlockSpec { channels: c, kernel: 5, pool: 2 }).collect(),
            merge_channels: 64,
            merge_kernel: 5,
            pool_fraction: 0.25,
            loss: LossKind::Bce,
        }
    }
}

impl ClsModelConfig {
    /// Narrow variant for single-CPU experiments.
    pub fn desk() -> Self {
        Self {
            encoder_blocks: [8, 16, 16].iter().map(|&c| BlockSpec { channels: c, kernel: 5, pool: 2 }).collect(),
            merge_channels: 16,
            ..Self::default()
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window_len_s * self.fs).round() as usize
    }

    pub fn embedding_dim(&self) -> usize {
        self.merge_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.window_len_s > 0.0) || self.n_channels == 0 {
            return Err(Error::Config("fs, window_len_s and n_channels must be positive".into()));
        }
        if self.encoder_blocks.is_empty()
            || self.encoder_blocks.iter().any(|b| b.channels == 0 || b.pool == 0 || b.kernel % 2 == 0)
        {
            return Err(Error::Config("classifier blocks need positive channels and pool, and odd kernels".into()));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(Error::Config("pool_fraction must lie in (0, 1]".into()));
        }
        if self.merge_channels == 0 || self.merge_kernel.is_multiple_of(2) {
            return Err(Error::Config("merge block needs positive channels and an odd kernel".into()));
        }
        let min_len = self.encoder_blocks.iter().map(|b| b.pool).product::<usize>();
        if self.window_samples() < min_len {
            return Err(Error::Config(format!(
                "window of {} samples is shorter than the total pooling {min_len}",
                self.window_samples()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ClsNet {
    encoders: Vec<Vec<ConvBlock>>,
    merge: ConvBlock,
    dense: Dense,
}

#[derive(Debug, Clone)]
pub struct ClsModel {
    pub config: ClsModelConfig,
    pub params: ParamSet,
    net: ClsNet,
}

/// Stage-2 output for one beat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatDescriptor {
    pub position: usize,
    pub logit: f64,
    pub prob_wide: f64,
    pub embedding: Vec<f64>,
}

impl ClsModel {
    pub fn new(config: ClsModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut encoders = Vec::new();
        for c in 0..config.n_channels {
            let mut c_in = 1;
            let mut enc = Vec::new();
            for (i, b) in config.encoder_blocks.iter().enumerate() {
                enc.push(ConvBlock::new(&mut ps, &format!("enc{c}.{i}"), c_in, b.channels, b.kernel, b.pool, &mut rng));
                c_in = b.channels;
            }
            encoders.push(enc);
        }
        let last = config.encoder_blocks.last().expect("validated").channels;
        let merge = ConvBlock::new(&mut ps, "merge", last, config.merge_channels, config.merge_kernel, 1, &mut rng);
        let dense = Dense::new(&mut ps, "dense", config.merge_channels, 1, &mut rng);
        Ok(Self { config, params: ps, net: ClsNet { encoders, merge, dense } })
    }

    /// `(embedding [B, d], logit [B])` for input `[B, C, L]`.
    pub fn forward(&self, g: &mut Graph, pv: &[Var], x: Var) -> Result<(Var, Var)> {
        let (b, c) = match *g.shape(x) {
            [b, c, _] => (b, c),
            ref s => return Err(Error::Shape(format!("classifier input must be [batch, channels, length], got {s:?}"))),
        };
        if c != self.config.n_channels {
            return Err(Error::Shape(format!("classifier expects {} channels, input has {c}", self.config.n_channels)));
        }
        let mut outs = Vec::with_capacity(c);
        for (ch, enc) in self.net.encoders.iter().enumerate() {
            let mut h = g.select_channel(x, ch)?;
            for block in enc {
                h = block.forward(g, pv, h)?;
            }
            outs.push(h);
        }
        let merged = g.mean_of(&outs)?;
        let mut h = self.net.merge.forward(g, pv, merged)?;
        let len = g.shape(h)[2];
        let keep = ((self.config.pool_fraction * len as f64).round() as usize).clamp(1, len);
        if keep < len {
            h = g.crop_len(h, (len - keep) / 2, keep)?;
        }
        let emb = g.global_avg_pool(h)?;
        let logit = self.net.dense.forward(g, pv, emb)?;
        let logit = g.reshape(logit, vec![b])?;
        Ok((emb, logit))
    }

    /// Embeddings and logits without gradient tracking.
    pub fn predict(&self, batch: Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let pv = self.params.bind_frozen(&mut g);
        let x = g.input(batch);
        let (e, l) = self.forward(&mut g, &pv, x)?;
        Ok((g.value(e).clone(), g.value(l).clone()))
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::Model("parameter layout does not match the model".into()));
        }
        Ok(Self { config: self.config.clone(), params, net: self.net.clone() })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: CLS_KIND.into(),
            config: serde_json::to_value(&self.config)?,
            meta: serde_json::json!({ "fs": self.config.fs, "embedding_dim": self.config.embedding_dim() }),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CLS_KIND {
            return Err(Error::Checkpoint(format!("expected a {CLS_KIND} checkpoint, found {:?}", ck.kind)));
        }
        let config: ClsModelConfig = serde_json::from_value(ck.config.clone())?;
        Self::new(config, 0)?.with_params(ck.params.clone())
    }
}

/// Normalized window of `window_len_s` centred on `position`, zero-padded
/// beyond the record.
pub fn extract_beat_window(record: &EcgRecord, position: usize, window_len_s: f64) -> Vec<Vec<f64>> {
    extract_centered(record, position, (window_len_s * record.fs).round() as usize)
}

/// One descriptor per position, in the given order.
pub fn classify_beats(model: &ClsModel, record: &EcgRecord, positions: &[usize]) -> Result<Vec<BeatDescriptor>> {
    if record.fs != model.config.fs {
        return Err(Error::Model(format!(
            "classifier expects {} Hz, record {} is at {} Hz",
            model.config.fs, record.record_id, record.fs
        )));
    }
    let mut out = Vec::with_capacity(positions.len());
    for group in positions.chunks(INFER_BATCH) {
        let windows: Vec<Vec<Vec<f64>>> =
            group.iter().map(|&p| extract_beat_window(record, p, model.config.window_len_s)).collect();
        let refs: Vec<&[Vec<f64>]> = windows.iter().map(|w| w.as_slice()).collect();
        let (emb, logit) = model.predict(Tensor::from_windows(&refs)?)?;
        let d = model.config.embedding_dim();
        for (k, &p) in group.iter().enumerate() {
            let l = logit.data()[k];
            out.push(BeatDescriptor {
                position: p,
                logit: l,
                prob_wide: sigmoid(l),
                embedding: emb.data()[k * d..(k + 1) * d].to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn label_of(prob_wide: f64) -> BeatClass {
    if prob_wide >= 0.5 {
        BeatClass::Wide
    } else {
        BeatClass::Narrow
    }
}

/// Wide-class counts of the classifier on true beat positions.
pub fn classification_counts_on_truth(model: &ClsModel, records: &[LabeledRecord]) -> Result<(Counts, usize, usize)> {
    let mut c = Counts::default();
    let (mut correct, mut total) = (0, 0);
    for r in records {
        let desc = classify_beats(model, &r.record, &r.annotation.positions)?;
        for (d, &truth) in desc.iter().zip(&r.annotation.labels) {
            let pred = label_of(d.prob_wide);
            match (pred.is_wide(), truth.is_wide()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
            correct += usize::from(pred == truth);
            total += 1;
        }
    }
    Ok((c, correct, total))
}

/// Trains on true beat positions, selecting weights by wide-class F1 on
/// `valid`.
pub fn train_classifier(
    train: &Dataset,
    valid: &[LabeledRecord],
    config: &ClsModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ClsModel, TrainLog)> {
    if train.wide_beats().is_empty() || train.narrow_beats().is_empty() {
        return Err(Error::Dataset(format!(
            "classifier training needs both classes (wide {}, narrow {})",
            train.wide_beats().len(),
            train.narrow_beats().len()
        )));
    }
    if train.fs() != Some(config.fs) {
        return Err(Error::Dataset(format!("training data at {:?} Hz, model expects {} Hz", train.fs(), config.fs)));
    }
    let mut model = ClsModel::new(config.clone(), train_cfg.seed)?;
    let mut tc = train_cfg.clone();
    tc.sampler.classification_window_s = config.window_len_s;
    let template = model.clone();
    let loss_kind = config.loss;
    let loss_fn = |g: &mut Graph, pv: &[Var], batch: &[crate::augment::Sample]| {
        let refs: Vec<&[Vec<f64>]> = batch.iter().map(|s| s.window.as_slice()).collect();
        let x = g.input(Tensor::from_windows(&refs)?);
        let y: Vec<f64> = batch
            .iter()
            .map(|s| match s.target {
                Target::Label(v) => Ok(v),
                Target::Mask(_) => Err(Error::Model("classification batch without labels".into())),
            })
            .collect::<Result<_>>()?;
        let (_, logit) = template.forward(g, pv, x)?;
        let p = g.sigmoid(logit);
        loss_kind.apply(g, p, &Tensor::new(vec![y.len()], y)?)
    };
    let validate = |params: &ParamSet, step: usize| -> Result<Validation> {
        let m = template.with_params(params.clone())?;
        let (c, _, _) = classification_counts_on_truth(&m, valid)?;
        let met = detection_metrics(&c);
        Ok(Validation { step, score: crate::seg::f1(&c), se: met.se, plus_p: met.plus_p })
    };
    let log = fit(
        &mut model.params,
        &tc,
        WindowKind::Classification,
        train,
        &loss_fn,
        if valid.is_empty() { None } else { Some(&validate) },
    )?;
    Ok((model, log))
}

pub fn encode_descriptors(desc: &[BeatDescriptor]) -> Result<String> {
    let d = desc.first().map_or(0, |x| x.embedding.len());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["position".to_string(), "logit".into(), "prob_wide".into()];
    header.extend((0..d).map(|i| format!("e_{i}")));
    w.write_record(&header)?;
    for x in desc {
        if x.embedding.len() != d {
            return Err(Error::Shape("descriptors have differing embedding lengths".into()));
        }
        let mut row = vec![x.position.to_string(), x.logit.to_string(), x.prob_wide.to_string()];
        row.extend(x.embedding.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn decode_descriptors(text: &str) -> Result<Vec<BeatDescriptor>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Descriptor { line: i + 2, message: format!("bad value in column {j}") })
        };
        let position = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Descriptor { line: i + 2, message: "bad position".into() })?;
        let embedding = (3..rec.len()).map(parse).collect::<Result<_>>()?;
        out.push(BeatDescriptor { position, logit: parse(1)?, prob_wide: parse(2)?, embedding });
    }
    Ok(out)
}

pub fn write_descriptors(desc: &[BeatDescriptor], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_descriptors(desc)?)?;
    Ok(())
}

pub fn read_descriptors(path: impl AsRef<Path>) -> Result<Vec<BeatDescriptor>> {
    decode_descriptors(&fs::read_to_string(path)?)
}
