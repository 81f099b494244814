mod common;

use std::fs;

use holter::cls::{classify_beats, read_descriptors, write_descriptors, ClsModel, ClsModelConfig};
use holter::config::PipelineConfig;
use holter::dataset::{load_corpus, write_corpus, LabeledRecord};
use holter::gbdt::{train_gbdt, FeatureMatrix, GbdtConfig, GbdtModel};
use holter::nn::{load_checkpoint, save_checkpoint};
use holter::seg::{SegModel, SegModelConfig};
use holter::signal_io::mitbih::{decode_212, wfdb_checksum};
use holter::signal_io::{
    generate_synthetic, import_mitbih_212, import_wfdb_record, parse_header, read_annotations, read_record, write_annotations,
    write_record, BeatClass, ChannelCalibration, Format212Header, SynthConfig,
};
use holter::Error;

#[test]
fn mit_excerpt_matches_reference_decoder() {
    let raw = decode_212(&fs::read(common::data_dir().join(common::MIT_100_DAT)).unwrap()).unwrap();
    assert_eq!(raw.len(), 20);
    assert_eq!(&raw[..4], &[995, 1011, 995, 1011]);
    let sums = [0, 1].map(|c| wfdb_checksum(raw.iter().skip(c).step_by(2).copied()));
    assert_eq!(sums, common::MIT_100_EXCERPT_CHECKSUMS);

    let h = parse_header(&fs::read_to_string(common::data_dir().join("mitdb/100.hea")).unwrap()).unwrap();
    let rec = import_mitbih_212(common::data_dir().join(common::MIT_100_DAT), &h.to_format212().unwrap()).unwrap();
    assert_eq!((rec.fs, rec.n_channels(), rec.n_samples()), (360.0, 2, 10));
    for (i, r) in common::mit_100_reference().iter().enumerate() {
        for (c, want) in r.iter().enumerate() {
            assert!((f64::from(rec.channels[c][i]) - want).abs() < 1e-6, "frame {i} channel {c}");
        }
    }
}

#[test]
fn vendored_header_checksums_cover_the_full_record() {
    let dir = tempfile::tempdir().unwrap();
    for f in ["100.dat", "100.hea"] {
        fs::copy(common::data_dir().join("mitdb").join(f), dir.path().join(f)).unwrap();
    }
    fs::write(dir.path().join("100.atr"), [0u8, 0]).unwrap();
    // The excerpt's header keeps the checksums of all 650000 frames.
    match import_wfdb_record(dir.path(), "100") {
        Err(Error::Format212(m)) => assert!(m.contains("checksum"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wfdb_import_of_excerpt() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(common::data_dir().join(common::MIT_100_DAT), dir.path().join("100.dat")).unwrap();
    let [a, b] = common::MIT_100_EXCERPT_CHECKSUMS;
    fs::write(
        dir.path().join("100.hea"),
        format!("100 2 360 10\n100.dat 212 200 11 1024 995 {a} 0 MLII\n100.dat 212 200 11 1024 1011 {b} 0 V5\n"),
    )
    .unwrap();
    // Normal beat at 2, R-on-T at 7, a rhythm label at 8.
    let word = |code: u16, dt: u16| (code << 10 | dt).to_le_bytes();
    let atr: Vec<u8> = [word(1, 2), word(41, 5), word(28, 1), [0, 0]].concat();
    fs::write(dir.path().join("100.atr"), atr).unwrap();
    let (rec, ann) = import_wfdb_record(dir.path(), "100").unwrap();
    assert_eq!(rec.n_samples(), 10);
    assert_eq!(ann.positions, vec![2, 7]);
    assert_eq!(ann.labels, vec![BeatClass::Narrow, BeatClass::Wide]);
    let moved = LabeledRecord::new(rec, ann).unwrap().resampled(180.0).unwrap();
    assert_eq!((moved.record.fs, moved.record.n_samples()), (180.0, 5));
    assert_eq!(moved.annotation.positions, vec![1, 4]);
}

#[test]
fn bare_212_import_with_json_header() {
    let dir = tempfile::tempdir().unwrap();
    let h = Format212Header {
        record_id: "x".into(),
        fs: 360.0,
        channels: vec![ChannelCalibration { gain: 200.0, baseline: 1024.0 }; 2],
    };
    let hp = dir.path().join("h.json");
    fs::write(&hp, serde_json::to_string(&h).unwrap()).unwrap();
    let rec =
        import_mitbih_212(common::data_dir().join(common::MIT_100_DAT), &Format212Header::from_json_file(&hp).unwrap()).unwrap();
    assert!((rec.channels[0][8] - -0.12).abs() < 1e-6);
    fs::write(dir.path().join("odd.dat"), [0u8; 4]).unwrap();
    assert!(import_mitbih_212(dir.path().join("odd.dat"), &h).is_err());
}

#[test]
fn corpus_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<LabeledRecord> = (0..3)
        .map(|s| {
            let cfg =
                SynthConfig { duration_s: 20.0, wide_fraction: 0.3, seed: s, record_id: format!("r{s}"), ..Default::default() };
            let (r, a) = generate_synthetic(&cfg).unwrap();
            LabeledRecord::new(r, a).unwrap()
        })
        .collect();
    write_corpus(dir.path(), &items).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in items.iter().zip(&back) {
        assert_eq!(a.record, b.record);
        assert_eq!((&a.annotation.positions, &a.annotation.labels), (&b.annotation.positions, &b.annotation.labels));
    }
    let r = read_record(dir.path().join("r1.ecg")).unwrap();
    write_record(&r, dir.path().join("copy.ecg")).unwrap();
    assert_eq!(fs::read(dir.path().join("r1.ecg")).unwrap(), fs::read(dir.path().join("copy.ecg")).unwrap());
    let a = read_annotations(dir.path().join("r1.csv"), r.fs).unwrap();
    write_annotations(&a, dir.path().join("copy.csv")).unwrap();
    assert_eq!(fs::read(dir.path().join("r1.csv")).unwrap(), fs::read(dir.path().join("copy.csv")).unwrap());
}

#[test]
fn truncated_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (r, _) = generate_synthetic(&SynthConfig { duration_s: 5.0, ..Default::default() }).unwrap();
    let p = dir.path().join("r.ecg");
    write_record(&r, &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_record(&p).is_err());

    let ck = dir.path().join("m.ck");
    save_checkpoint(&SegModel::new(SegModelConfig::desk(), 0).unwrap().to_checkpoint().unwrap(), &ck).unwrap();
    let bytes = fs::read(&ck).unwrap();
    fs::write(&ck, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint(&ck).is_err());

    let csv = dir.path().join("a.csv");
    fs::write(&csv, "10,N\n5,N\n").unwrap();
    assert!(read_annotations(&csv, 250.0).is_err());
}

#[test]
fn descriptors_gbdt_and_config_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cls = ClsModel::new(ClsModelConfig::desk(), 3).unwrap();
    let (rec, ann) = generate_synthetic(&SynthConfig { duration_s: 20.0, seed: 4, ..Default::default() }).unwrap();
    let rec = holter::preprocess::preprocess_record(&rec, &Default::default()).unwrap();
    let pos = ann.rescaled(rec.fs).positions;
    let desc = classify_beats(&cls, &rec, &pos).unwrap();
    write_descriptors(&desc, dir.path().join("d.csv")).unwrap();
    assert_eq!(read_descriptors(dir.path().join("d.csv")).unwrap(), desc);

    let x = FeatureMatrix::new(vec!["a".into(), "b".into()], (0..200).map(|i| ((i * 37) % 23) as f64).collect()).unwrap();
    let y: Vec<f64> = (0..100).map(|i| f64::from(u8::from(x.row(i)[0] > 11.0))).collect();
    let cfg = GbdtConfig { max_trees: 5, min_samples_leaf: 2, ..Default::default() };
    let m = train_gbdt(&x, &y, &x, &y, &cfg).unwrap();
    m.save(dir.path().join("g.json")).unwrap();
    let back = GbdtModel::load(dir.path().join("g.json")).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());

    let c = PipelineConfig::desk().with_seed(21);
    c.save(dir.path().join("c.json")).unwrap();
    assert_eq!(PipelineConfig::load(dir.path().join("c.json")).unwrap(), c);
    assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
}
