//! Annotated corpora and window extraction shared by both network stages.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::{normalize_window, preprocess_record, resample_record, PreprocessConfig};
use crate::signal_io::{read_annotations, read_record, write_annotations, write_record, BeatAnnotation, BeatClass, EcgRecord};

/// File extension of project-format records.
pub const RECORD_EXT: &str = "ecg";
/// File extension of beat annotation CSVs.
pub const ANNOTATION_EXT: &str = "csv";

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub record: EcgRecord,
    /// Positions refer to `record.fs`.
    pub annotation: BeatAnnotation,
}

impl LabeledRecord {
    pub fn new(record: EcgRecord, annotation: BeatAnnotation) -> Result<Self> {
        if annotation.fs_ref != record.fs {
            return Err(Error::Dataset(format!(
                "annotation refers to {} Hz but record {} is sampled at {} Hz",
                annotation.fs_ref, record.record_id, record.fs
            )));
        }
        Ok(Self { record, annotation })
    }

    /// Resamples the record to `fs` and moves the annotation with it.
    pub fn resampled(&self, fs: f64) -> Result<Self> {
        if fs == self.record.fs {
            return Ok(self.clone());
        }
        let record = resample_record(&self.record, fs)?;
        Ok(Self { annotation: clip(self.annotation.rescaled(fs), record.n_samples()), record })
    }

    /// Applies the preprocessing chain and moves the annotation to the new rate.
    pub fn preprocessed(&self, config: &PreprocessConfig) -> Result<Self> {
        let record = preprocess_record(&self.record, config)?;
        Ok(Self { annotation: clip(self.annotation.rescaled(record.fs), record.n_samples()), record })
    }
}

fn clip(mut a: BeatAnnotation, n: usize) -> BeatAnnotation {
    let keep = a.positions.iter().take_while(|&&p| p < n).count();
    a.positions.truncate(keep);
    a.labels.truncate(keep);
    a
}

/// A set of preprocessed, annotated records indexed by beat class.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub items: Vec<LabeledRecord>,
    wide: Vec<(usize, usize)>,
    narrow: Vec<(usize, usize)>,
}

impl Dataset {
    pub fn new(items: Vec<LabeledRecord>) -> Self {
        let mut wide = Vec::new();
        let mut narrow = Vec::new();
        for (r, item) in items.iter().enumerate() {
            for (b, label) in item.annotation.labels.iter().enumerate() {
                match label {
                    BeatClass::Wide => wide.push((r, b)),
                    BeatClass::Narrow => narrow.push((r, b)),
                }
            }
        }
        Self { items, wide, narrow }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// (record index, beat index) of every wide beat.
    pub fn wide_beats(&self) -> &[(usize, usize)] {
        &self.wide
    }

    pub fn narrow_beats(&self) -> &[(usize, usize)] {
        &self.narrow
    }

    pub fn n_beats(&self) -> usize {
        self.wide.len() + self.narrow.len()
    }

    pub fn fs(&self) -> Option<f64> {
        self.items.first().map(|i| i.record.fs)
    }

    pub fn n_channels(&self) -> Option<usize> {
        self.items.first().map(|i| i.record.n_channels())
    }
}

/// Copies `len` samples starting at `start` (may be negative or run past
/// the end), normalizing the in-record part and zero-padding the rest.
pub fn extract_span(record: &EcgRecord, start: isize, len: usize) -> Vec<Vec<f64>> {
    let n = record.n_samples() as isize;
    let lo = start.clamp(0, n);
    let hi = (start + len as isize).clamp(0, n);
    let mut real: Vec<Vec<f64>> =
        record.channels.iter().map(|ch| ch[lo as usize..hi as usize].iter().map(|&v| f64::from(v)).collect()).collect();
    normalize_window(&mut real);
    let left = (lo - start) as usize;
    real.into_iter()
        .map(|part| {
            let mut out = vec![0.0; len];
            out[left..left + part.len()].copy_from_slice(&part);
            out
        })
        .collect()
}

/// Window of `len` samples whose index `len / 2` is `position`.
pub fn extract_centered(record: &EcgRecord, position: usize, len: usize) -> Vec<Vec<f64>> {
    extract_span(record, position as isize - (len / 2) as isize, len)
}

/// Reads every `<name>.ecg` in `dir` that has a sibling `<name>.csv`.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<LabeledRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == RECORD_EXT))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let ann_path = p.with_extension(ANNOTATION_EXT);
        if !ann_path.exists() {
            log::warn!("skipping {}: no annotation file", p.display());
            continue;
        }
        let record = read_record(&p)?;
        let annotation = read_annotations(&ann_path, record.fs)?;
        out.push(LabeledRecord::new(record, annotation)?);
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no annotated records found in {}", dir.as_ref().display())));
    }
    Ok(out)
}

/// Writes each item as `<record_id>.ecg` plus `<record_id>.csv` in `dir`,
/// creating it if needed.
pub fn write_corpus(dir: impl AsRef<Path>, items: &[LabeledRecord]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for it in items {
        let base = dir.join(&it.record.record_id);
        write_record(&it.record, base.with_extension(RECORD_EXT))?;
        write_annotations(&it.annotation, base.with_extension(ANNOTATION_EXT))?;
    }
    Ok(())
}

pub fn preprocess_all(items: &[LabeledRecord], config: &PreprocessConfig) -> Result<Vec<LabeledRecord>> {
    items.iter().map(|i| i.preprocessed(config)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_record(n: usize) -> EcgRecord {
        EcgRecord::new("r", 125.0, vec![(0..n).map(|i| i as f32).collect()]).unwrap()
    }

    #[test]
    fn span_inside_record_is_normalized_copy() {
        let rec = ramp_record(100);
        let w = extract_span(&rec, 10, 5);
        // [10..15) has median 12 and IQR 2
        assert_eq!(w[0], vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn span_pads_outside_record() {
        let rec = ramp_record(4);
        let w = extract_span(&rec, -2, 8);
        assert_eq!(w[0].len(), 8);
        assert_eq!(&w[0][..2], &[0.0, 0.0]);
        assert_eq!(&w[0][6..], &[0.0, 0.0]);
    }

    #[test]
    fn dataset_indexes_classes() {
        let rec = ramp_record(50);
        let ann =
            BeatAnnotation::new(vec![5, 20, 40], vec![BeatClass::Narrow, BeatClass::Wide, BeatClass::Narrow], 125.0).unwrap();
        let ds = Dataset::new(vec![LabeledRecord::new(rec, ann).unwrap()]);
        assert_eq!(ds.wide_beats(), &[(0, 1)]);
        assert_eq!(ds.narrow_beats(), &[(0, 0), (0, 2)]);
    }

    #[test]
    fn mismatched_rates_rejected() {
        let rec = ramp_record(10);
        let ann = BeatAnnotation::new(vec![1], vec![BeatClass::Narrow], 250.0).unwrap();
        assert!(LabeledRecord::new(rec, ann).is_err());
    }
}
