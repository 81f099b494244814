//! One JSON document holding the settings of every stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cls::ClsModelConfig;
use crate::error::{Error, Result};
use crate::eval::MatchConfig;
use crate::gbdt::{FeatureConfig, GbdtConfig};
use crate::preprocess::PreprocessConfig;
use crate::seg::{PanTompkinsConfig, PeakConfig, SegModelConfig};
use crate::signal_io::CorpusConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub seg: SegModelConfig,
    pub seg_train: TrainConfig,
    pub peaks: PeakConfig,
    pub pan_tompkins: PanTompkinsConfig,
    pub cls: ClsModelConfig,
    pub cls_train: TrainConfig,
    pub features: FeatureConfig,
    pub gbdt: GbdtConfig,
    pub matching: MatchConfig,
    pub synth: CorpusConfig,
}

impl PipelineConfig {
    /// Narrow networks and short schedules that train on one CPU in minutes.
    pub fn desk() -> Self {
        let mut c = Self { seg: SegModelConfig::desk(), cls: ClsModelConfig::desk(), ..Self::default() };
        c.seg_train.steps = 1000;
        c.seg_train.valid_every = 250;
        c.seg_train.optimizer.batch_size = 8;
        c.cls_train.steps = 6000;
        c.cls_train.valid_every = 1000;
        c.cls_train.optimizer.batch_size = 32;
        c
    }

    /// Propagates `seed` to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.seg_train = self.seg_train.with_seed(seed);
        self.cls_train = self.cls_train.with_seed(seed.wrapping_add(1));
        self.gbdt.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        self.cls.validate()?;
        self.seg_train.validate()?;
        self.cls_train.validate()?;
        self.peaks.validate()?;
        self.matching.validate()?;
        self.gbdt.validate()?;
        if self.seg.fs != self.cls.fs || self.seg.n_channels != self.cls.n_channels {
            return Err(Error::Config(format!(
                "segmentation ({} Hz, {} channels) and classifier ({} Hz, {} channels) disagree",
                self.seg.fs, self.seg.n_channels, self.cls.fs, self.cls.n_channels
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = PipelineConfig::desk().with_seed(4);
        assert_eq!(PipelineConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        let partial = PipelineConfig::from_json(r#"{"seed": 3, "gbdt": {"max_depth": 4}}"#).unwrap();
        assert_eq!(partial.gbdt.max_depth, 4);
        assert_eq!(partial.gbdt.n_bins, 256);
        assert_eq!(partial.seg, SegModelConfig::default());
    }

    #[test]
    fn rate_mismatch_rejected() {
        let mut c = PipelineConfig::default();
        c.cls.fs = 250.0;
        assert!(c.validate().is_err());
        assert!(PipelineConfig::from_json(r#"{"gbdt": {"n_bins": 1000}}"#).is_err());
    }
}
