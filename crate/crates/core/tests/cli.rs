use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use holter::config::PipelineConfig;
use holter::eval::EvalReport;
use holter::signal_io::read_annotations;

fn holter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_holter")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = holter(args);
    assert!(o.status.success(), "holter {args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn first_record(dir: &Path) -> PathBuf {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ecg"))
        .collect();
    v.sort();
    v.remove(0)
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mut cfg = PipelineConfig::desk();
    cfg.seg_train.steps = 6;
    cfg.seg_train.valid_every = 3;
    cfg.cls_train.steps = 10;
    cfg.cls_train.valid_every = 5;
    cfg.gbdt.min_samples_leaf = 2;
    cfg.save(p("cfg.json")).unwrap();
    let c = s(&p("cfg.json")).to_string();

    ok(&["synth", "--n-records", "3", "--duration-s", "40", "--id-prefix", "tr", "--seed", "1", "--out", s(&p("train"))]);
    ok(&["synth", "--n-records", "2", "--duration-s", "40", "--id-prefix", "va", "--seed", "2", "--out", s(&p("valid"))]);
    let (train, valid) = (p("train"), p("valid"));
    let data = ["--train", s(&train), "--valid", s(&valid)];
    ok(&[&["train-seg", "--config", &c, "--out", s(&p("seg.ck")), "--log", s(&p("log.json"))], &data[..]].concat());
    assert!(p("log.json").exists());
    ok(&[&["train-cls", "--config", &c, "--out", s(&p("cls.ck"))], &data[..]].concat());
    ok(&[
        &["train-gbdt", "--config", &c, "--seg", s(&p("seg.ck")), "--cls", s(&p("cls.ck")), "--out", s(&p("g.json"))],
        &data[..],
    ]
    .concat());

    let rec = first_record(&p("valid"));
    let truth = rec.with_extension("csv");
    ok(&["detect", "--record", s(&rec), "--out", s(&p("pt.csv"))]);
    let pt = read_annotations(p("pt.csv"), 250.0).unwrap();
    assert!(pt.len() > 20, "{}", pt.len());
    ok(&["detect", "--record", s(&rec), "--seg", s(&p("seg.ck")), "--config", &c, "--out", s(&p("det.csv"))]);
    ok(&[
        "classify",
        "--record",
        s(&rec),
        "--seg",
        s(&p("seg.ck")),
        "--cls",
        s(&p("cls.ck")),
        "--config",
        &c,
        "--out",
        s(&p("desc.csv")),
    ]);
    assert!(std::fs::read_to_string(p("desc.csv")).unwrap().starts_with("position,logit,prob_wide,e_0"));
    let (seg, cls, gbdt) = (p("seg.ck"), p("cls.ck"), p("g.json"));
    let models = ["--seg", s(&seg), "--cls", s(&cls), "--gbdt", s(&gbdt)];
    ok(&[
        &[
            "run",
            "--record",
            s(&rec),
            "--truth",
            s(&truth),
            "--report",
            s(&p("run.json")),
            "--out",
            s(&p("run.csv")),
            "--config",
            &c,
        ],
        &models[..],
    ]
    .concat());
    assert_eq!(read_annotations(p("run.csv"), 250.0).unwrap().fs_ref, 250.0);
    EvalReport::from_json(&std::fs::read_to_string(p("run.json")).unwrap()).unwrap();

    let table = ok(&[&["eval", "--data", s(&p("valid")), "--config", &c, "--out", s(&p("eval.json"))], &models[..]].concat());
    assert!(table.contains("NN+GBDT"), "{table}");
    assert!(p("eval.json").exists());
    let pt_table = ok(&["eval", "--data", s(&p("valid")), "--pan-tompkins"]);
    assert!(pt_table.contains("detection"), "{pt_table}");
}

#[test]
fn preprocess_command() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let pre = dir.path().join("pre");
    ok(&["synth", "--n-records", "1", "--duration-s", "10", "--out", s(&raw)]);
    ok(&["preprocess", "--input", s(&raw), "--out", s(&pre)]);
    assert_eq!(holter::signal_io::read_record(first_record(&pre)).unwrap().fs, 125.0);
}

#[test]
fn gradcheck_command() {
    let out = ok(&["gradcheck", "--rounds", "1"]);
    assert!(out.contains("dice_loss"), "{out}");
}

#[test]
fn errors_exit_nonzero_with_message() {
    let o = holter(&["detect", "--record", "/nonexistent/r.ecg", "--out", "/tmp/never.csv"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/nonexistent/r.ecg"), "{err}");
    let o = holter(&["synth"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("--out"));
}
