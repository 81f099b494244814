//! Record and annotation I/O, MIT-BIH import and the synthetic ECG generator.

pub mod annotation;
pub mod mitbih;
pub mod record;
pub mod synth;
pub mod wfdb;

pub use annotation::{
    decode_annotations, encode_annotations, read_annotations, write_annotations, BeatAnnotation, BeatClass, Provenance,
};
pub use mitbih::{import_mitbih_212, ChannelCalibration, Format212Header};
pub use record::{decode_record, encode_record, read_record, write_record, EcgRecord};
pub use synth::{corpus_configs, generate_corpus, generate_synthetic, CorpusConfig, DropoutSegment, SynthConfig};
pub use wfdb::{import_wfdb_record, parse_header, WfdbHeader};
