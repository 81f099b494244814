use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use holter::cls::{train_classifier, write_descriptors};
use holter::config::PipelineConfig;
use holter::dataset::{load_corpus, preprocess_all, write_corpus, Dataset, LabeledRecord};
use holter::eval::{comparison_table, evaluate_record, EvalReport};
use holter::nn::{load_checkpoint, op_suite, save_checkpoint};
use holter::pipeline::{evaluate_corpus, predict_raw, run_pipeline, train_stacker, Models};
use holter::preprocess::preprocess_record;
use holter::seg::{detect_beats, detect_pan_tompkins, train_segmentation, SegModel};
use holter::signal_io::{
    generate_corpus, import_mitbih_212, import_wfdb_record, read_record, write_annotations, write_record, Format212Header,
};
use holter::train::TrainLog;

#[derive(Parser)]
#[command(name = "holter", version, about = "Holter ECG beat detection and wide/narrow classification")]
struct Cli {
    /// Seed for every stochastic component (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with the settings of all stages.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Start from the small single-CPU configuration instead of the full-size defaults.
    #[arg(long, global = true)]
    desk: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelPaths {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long)]
    cls: PathBuf,
    #[arg(long)]
    gbdt: Option<PathBuf>,
}

#[derive(Args)]
struct TrainData {
    /// Directory of `.ecg` records with `.csv` annotations.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Inputs are already preprocessed.
    #[arg(long)]
    preprocessed: bool,
    /// Write the per-step training log here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus.
    Synth {
        #[arg(long)]
        n_records: Option<usize>,
        #[arg(long)]
        duration_s: Option<f64>,
        #[arg(long)]
        id_prefix: Option<String>,
    },
    /// Convert MIT-BIH records (`.hea`, `.dat`, `.atr`) or a bare format-212 file.
    ImportMitbih {
        /// Directory holding the WFDB files.
        #[arg(long, conflicts_with_all = ["dat", "header"])]
        dir: Option<PathBuf>,
        /// Record names inside `--dir`.
        #[arg(long, num_args = 1..)]
        record: Vec<String>,
        /// Format-212 data file, with `--header` naming its JSON header.
        #[arg(long, requires = "header")]
        dat: Option<PathBuf>,
        #[arg(long)]
        header: Option<PathBuf>,
        /// Resample WFDB records to this rate (Hz); 0 keeps the stored rate.
        #[arg(long, default_value_t = 250.0)]
        fs: f64,
    },
    /// Apply the preprocessing chain to a corpus.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the segmentation network.
    TrainSeg {
        #[command(flatten)]
        data: TrainData,
        /// Fine-tune from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train the wide/narrow classifier.
    TrainCls {
        #[command(flatten)]
        data: TrainData,
    },
    /// Train the stacked GBDT on records unseen by the networks.
    TrainGbdt {
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        cls: PathBuf,
        #[command(flatten)]
        data: TrainData,
    },
    /// Detect beats in one record.
    Detect {
        #[arg(long)]
        record: PathBuf,
        /// Segmentation checkpoint; without it the Pan–Tompkins detector runs.
        #[arg(long)]
        seg: Option<PathBuf>,
    },
    /// Detect and classify the beats of one record, writing descriptors.
    Classify {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        cls: PathBuf,
    },
    /// Run all stages on one record.
    Run {
        #[arg(long)]
        record: PathBuf,
        #[command(flatten)]
        models: ModelPaths,
        /// True annotation of the record, for a report.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate on an annotated corpus.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seg: Option<PathBuf>,
        #[arg(long)]
        cls: Option<PathBuf>,
        #[arg(long)]
        gbdt: Option<PathBuf>,
        /// Evaluate the Pan–Tompkins detector instead of the models.
        #[arg(long)]
        pan_tompkins: bool,
        #[arg(long)]
        preprocessed: bool,
    },
    /// Check analytic gradients of every layer and loss.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        rounds: u64,
    },
}

fn out_path(cli_out: &Option<PathBuf>) -> Result<&Path> {
    cli_out.as_deref().context("--out is required for this command")
}

fn load_data(dir: &Path, preprocessed: bool, cfg: &PipelineConfig) -> Result<Vec<LabeledRecord>> {
    let items = load_corpus(dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok(if preprocessed { items } else { preprocess_all(&items, &cfg.preprocess)? })
}

fn write_log(path: &Option<PathBuf>, log: &TrainLog) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, serde_json::to_string_pretty(log)?)?;
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        // library errors already embed their source's message
        let mut msg = String::new();
        for cause in e.chain() {
            let c = cause.to_string();
            if !msg.contains(&c) {
                msg = if msg.is_empty() { c } else { format!("{msg}: {c}") };
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None if cli.desk => PipelineConfig::desk(),
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;

    match cli.command {
        Command::Synth { n_records, duration_s, id_prefix } => {
            let mut c = cfg.synth.clone();
            c.n_records = n_records.unwrap_or(c.n_records);
            c.duration_s = duration_s.unwrap_or(c.duration_s);
            c.id_prefix = id_prefix.unwrap_or(c.id_prefix);
            let items: Vec<LabeledRecord> =
                generate_corpus(&c)?.into_iter().map(|(r, a)| LabeledRecord::new(r, a)).collect::<holter::Result<_>>()?;
            write_corpus(out_path(&cli.out)?, &items)?;
            println!("wrote {} records", items.len());
        }
        Command::ImportMitbih { dir, record, dat, header, fs } => {
            let out = out_path(&cli.out)?;
            match (dir, dat, header) {
                (Some(dir), None, None) => {
                    if record.is_empty() {
                        bail!("--dir needs at least one --record");
                    }
                    let mut items = Vec::new();
                    for name in &record {
                        let (r, a) = import_wfdb_record(&dir, name).with_context(|| format!("importing {name}"))?;
                        let item = LabeledRecord::new(r, a)?;
                        items.push(if fs > 0.0 { item.resampled(fs)? } else { item });
                    }
                    write_corpus(out, &items)?;
                    println!("imported {} records", items.len());
                }
                (None, Some(dat), Some(h)) => {
                    let rec = import_mitbih_212(&dat, &Format212Header::from_json_file(&h)?)?;
                    write_record(&rec, out)?;
                    println!("imported {} samples x {} channels", rec.n_samples(), rec.n_channels());
                }
                _ => bail!("give either --dir with --record, or --dat with --header"),
            }
        }
        Command::Preprocess { input } => {
            let items = load_data(&input, false, &cfg)?;
            write_corpus(out_path(&cli.out)?, &items)?;
            println!("preprocessed {} records", items.len());
        }
        Command::TrainSeg { data, init } => {
            let out = out_path(&cli.out)?;
            let train = Dataset::new(load_data(&data.train, data.preprocessed, &cfg)?);
            let valid = load_data(&data.valid, data.preprocessed, &cfg)?;
            let init = init.map(|p| load_checkpoint(p).and_then(|c| SegModel::from_checkpoint(&c))).transpose()?;
            let (m, log) = train_segmentation(&train, &valid, &cfg.seg, &cfg.seg_train, &cfg.peaks, &cfg.matching, init)?;
            save_checkpoint(&m.to_checkpoint()?, out)?;
            write_log(&data.log, &log)?;
            println!("best step {}", log.best_step);
        }
        Command::TrainCls { data } => {
            let out = out_path(&cli.out)?;
            let train = Dataset::new(load_data(&data.train, data.preprocessed, &cfg)?);
            let valid = load_data(&data.valid, data.preprocessed, &cfg)?;
            let (m, log) = train_classifier(&train, &valid, &cfg.cls, &cfg.cls_train)?;
            save_checkpoint(&m.to_checkpoint()?, out)?;
            write_log(&data.log, &log)?;
            println!("best step {}", log.best_step);
        }
        Command::TrainGbdt { seg, cls, data } => {
            let out = out_path(&cli.out)?;
            let models = Models::load(&seg, &cls, None)?;
            let train = load_data(&data.train, data.preprocessed, &cfg)?;
            let valid = load_data(&data.valid, data.preprocessed, &cfg)?;
            let g = train_stacker(&models.seg, &models.cls, &train, &valid, &cfg)?;
            g.save(out)?;
            println!("best iteration {}", g.best_iteration);
        }
        Command::Detect { record, seg } => {
            let raw = read_record(&record).with_context(|| format!("reading {}", record.display()))?;
            let ann = match seg {
                Some(p) => {
                    let m = SegModel::from_checkpoint(&load_checkpoint(p)?)?;
                    let fs_out = cfg.preprocess.output_fs(raw.fs);
                    if fs_out != m.config.fs {
                        bail!("record preprocesses to {fs_out} Hz but the model expects {} Hz", m.config.fs);
                    }
                    detect_beats(&m, &preprocess_record(&raw, &cfg.preprocess)?, &cfg.peaks)?.rescaled(raw.fs)
                }
                None => detect_pan_tompkins(&raw, &cfg.pan_tompkins),
            };
            write_annotations(&ann, out_path(&cli.out)?)?;
            println!("{} beats", ann.len());
        }
        Command::Classify { record, seg, cls } => {
            let models = Models::load(&seg, &cls, None)?;
            let raw = read_record(&record).with_context(|| format!("reading {}", record.display()))?;
            let p = predict_raw(&models, &raw, &cfg)?;
            write_descriptors(&p.descriptors, out_path(&cli.out)?)?;
            println!("{} beats, {} wide", p.nn.len(), p.nn.wide_count());
        }
        Command::Run { record, models, truth, report } => {
            let m = Models::load(&models.seg, &models.cls, models.gbdt.as_deref())?;
            let (ann, rep) = run_pipeline(&record, &m, &cfg, out_path(&cli.out)?, truth.as_deref())
                .with_context(|| format!("running on {}", record.display()))?;
            println!("{} beats, {} wide", ann.len(), ann.wide_count());
            if let Some(r) = rep {
                println!("{}", r.table());
                if let Some(p) = report {
                    fs::write(p, r.to_json()?)?;
                }
            }
        }
        Command::Eval { data, seg, cls, gbdt, pan_tompkins, preprocessed } => {
            let text = if pan_tompkins {
                if preprocessed {
                    bail!("the Pan-Tompkins baseline runs on raw records");
                }
                let items = load_corpus(&data)?;
                let recs = items
                    .iter()
                    .map(|r| {
                        evaluate_record(
                            &r.record.record_id,
                            &detect_pan_tompkins(&r.record, &cfg.pan_tompkins),
                            &r.annotation,
                            &cfg.matching,
                        )
                    })
                    .collect::<holter::Result<Vec<_>>>()?;
                let rep = EvalReport::from_records(recs, &cfg.matching);
                if let Some(out) = &cli.out {
                    fs::write(out, rep.to_json()?)?;
                }
                rep.table()
            } else {
                let (Some(seg), Some(cls)) = (seg, cls) else { bail!("--seg and --cls are required unless --pan-tompkins") };
                let m = Models::load(&seg, &cls, gbdt.as_deref())?;
                let reps = evaluate_corpus(&m, &load_data(&data, preprocessed, &cfg)?, &cfg)?;
                if let Some(out) = &cli.out {
                    fs::write(out, serde_json::to_string_pretty(&reps)?)?;
                }
                match &reps.stacked {
                    Some(s) => comparison_table(&[("NN", &reps.nn), ("NN+GBDT", s)]),
                    None => reps.nn.table(),
                }
            };
            println!("{text}");
        }
        Command::Gradcheck { rounds } => {
            let base = cli.seed.unwrap_or(cfg.seed);
            let mut failed = 0;
            for r in 0..rounds {
                for c in op_suite(base.wrapping_add(r))? {
                    let status = if c.report.passed { "ok" } else { "FAIL" };
                    println!("{:<24} max rel err {:.3e} (tol {:.0e}) {status}", c.op, c.report.max_rel_err, c.report.tolerance);
                    failed += usize::from(!c.report.passed);
                }
            }
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
    }
    Ok(())
}
