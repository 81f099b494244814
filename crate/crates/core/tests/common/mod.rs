#![allow(dead_code)]

use std::path::{Path, PathBuf};

use holter::dataset::{preprocess_all, LabeledRecord};
use holter::preprocess::PreprocessConfig;
use holter::signal_io::{generate_corpus, CorpusConfig};

/// Preprocessed synthetic corpus with the default noise and dropout.
pub fn corpus(n: usize, duration_s: f64, seed: u64, prefix: &str) -> Vec<LabeledRecord> {
    let c = CorpusConfig { n_records: n, duration_s, seed, id_prefix: prefix.into(), ..Default::default() };
    let raw: Vec<LabeledRecord> =
        generate_corpus(&c).unwrap().into_iter().map(|(r, a)| LabeledRecord::new(r, a).unwrap()).collect();
    preprocess_all(&raw, &PreprocessConfig::default()).unwrap()
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Format-212 excerpt of MIT-BIH record 100 (10 frames, 2 signals).
pub const MIT_100_DAT: &str = "mitdb/100.dat";
/// Per-signal WFDB checksums of the excerpt, frozen from an independent decoder.
pub const MIT_100_EXCERPT_CHECKSUMS: [i16; 2] = [9957, 10104];

/// Reference samples (mV) of the excerpt from the same decoder.
pub fn mit_100_reference() -> Vec<[f64; 2]> {
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data_dir().join("mitdb/100.ref.json")).unwrap()).unwrap();
    v["rows"].as_array().unwrap().iter().map(|r| [r[0].as_f64().unwrap(), r[1].as_f64().unwrap()]).collect()
}
