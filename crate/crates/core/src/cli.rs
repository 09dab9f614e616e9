//! `emopose` command line: ingest, train, eval, predict.
//!
//! Exit codes: 0 success, 1 I/O failure while writing outputs, 2 bad
//! arguments or inputs, 3 no usable data, 4 training diverged.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;

use crate::config::{parse_override, RunConfig, Task};
use crate::dataset::{build_manifest, class_histogram, split_train_val, subsample, IngestOptions, Manifest, Split};
use crate::emotion::{va_to_class, EmotionClass};
use crate::keypoint_io::{read_frame, select_person, to_feature_vector, FrameRef};
use crate::nn::{forward, predict_class, Checkpoint, DenseMatrix};
use crate::train::{config_from_checkpoint, evaluate, load_split, train, EpochRecord, LoadReport, TrainData, TrainError};

pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NO_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

/// Environment variable holding the log filter (e.g. `info`, `debug`).
pub const LOG_ENV: &str = "EMOPOSE_LOG";

#[derive(Debug, Parser)]
#[command(name = "emopose", version, about = "Emotion recognition from OpenPose keypoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan OpenPose output and label files into a manifest.
    Ingest(IngestArgs),
    /// Train a network from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// Predict emotions for keypoint files.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Directory with one subdirectory of frame files per video.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Directory with one `<video>.txt` label file per video.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Manifest to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep every n-th frame of each video [default: 10].
    #[arg(long)]
    stride: Option<usize>,
    /// Fraction of videos held out for validation [default: 0.2].
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Seed for the video-level split [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Run config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config file.
    #[arg(long)]
    config: PathBuf,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// `train` or `val`.
    #[arg(long, default_value = "val")]
    split: String,
    /// Append the JSON report line to this file instead of stdout.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A keypoint JSON file or a directory of them.
    input: PathBuf,
}

/// Error carrying the process exit code.
struct Failure {
    code: i32,
    message: String,
}

fn fail(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    fail(EXIT_IO, format!("{}: {e}", path.display()))
}

/// Run the CLI with the given arguments (including the program name).
pub fn run(args: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .target(env_logger::Target::Stderr)
        .try_init();

    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Predict(a) => predict(a, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn build_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, Failure> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p).map_err(|e| fail(EXIT_USAGE, e.to_string()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    Ok(cfg)
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, Failure> {
    sets.iter()
        .map(|s| parse_override(s).map_err(|e| fail(EXIT_USAGE, e.to_string())))
        .collect()
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> CmdResult {
    let mut overrides = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    flag("root", a.root.map(|p| p.display().to_string()));
    flag("labels", a.labels.map(|p| p.display().to_string()));
    flag("manifest", a.out.map(|p| p.display().to_string()));
    flag("stride", a.stride.map(|v| v.to_string()));
    flag("val_fraction", a.val_fraction.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    overrides.extend(parse_sets(&a.set)?);
    let cfg = build_config(a.config.as_deref(), &overrides)?;
    cfg.validate_ingest().map_err(|e| fail(EXIT_USAGE, e.to_string()))?;

    let root = cfg.root.clone().ok_or_else(|| fail(EXIT_USAGE, "--root is required"))?;
    let labels = cfg.labels.clone().ok_or_else(|| fail(EXIT_USAGE, "--labels is required"))?;
    let out_path = cfg.manifest.clone().ok_or_else(|| fail(EXIT_USAGE, "--out is required"))?;
    for (what, dir) in [("root", &root), ("labels", &labels)] {
        if !dir.is_dir() {
            return Err(fail(EXIT_USAGE, format!("{what} directory {} does not exist", dir.display())));
        }
    }

    let opts = IngestOptions {
        pattern: cfg.frame_name_pattern(),
        parse: cfg.parse_options(),
    };
    let (full, skipped) = build_manifest(&root, &labels, &opts).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    for (path, why) in &skipped.unreadable {
        warn!("skipped {}: {why}", path.display());
    }
    let sampled = subsample(&full, cfg.stride).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    if sampled.is_empty() {
        return Err(fail(EXIT_NO_DATA, "no usable labeled frames found"));
    }
    let manifest = split_train_val(&sampled, cfg.val_fraction, cfg.seed).map_err(|e| fail(EXIT_NO_DATA, e.to_string()))?;
    manifest.save(&out_path).map_err(|e| fail(EXIT_IO, e.to_string()))?;

    let (train_n, val_n) = manifest.split_counts();
    let w = |e| io_fail(Path::new("stdout"), e);
    writeln!(out, "manifest = {}", out_path.display()).map_err(w)?;
    writeln!(out, "videos = {}", manifest.video_ids().len()).map_err(w)?;
    writeln!(out, "samples = {}", manifest.len()).map_err(w)?;
    writeln!(out, "train = {train_n}").map_err(w)?;
    writeln!(out, "val = {val_n}").map_err(w)?;
    writeln!(out, "skipped.sentinel = {}", skipped.sentinel).map_err(w)?;
    writeln!(out, "skipped.unlabeled = {}", skipped.unlabeled).map_err(w)?;
    writeln!(out, "skipped.unreadable = {}", skipped.unreadable.len()).map_err(w)?;
    let hist = class_histogram(&manifest);
    for c in EmotionClass::ALL {
        writeln!(out, "class.{c} = {}", hist[c.code()]).map_err(w)?;
    }
    let va = manifest.records().iter().filter(|r| r.va_label.is_some()).count();
    writeln!(out, "va_samples = {va}").map_err(w)?;
    Ok(())
}

fn write_load_report(out: &mut dyn Write, r: &LoadReport) -> std::io::Result<()> {
    writeln!(out, "skipped.unlabeled = {}", r.unlabeled)?;
    writeln!(out, "skipped.unreadable = {}", r.unreadable)?;
    writeln!(out, "skipped.low_validity = {}", r.low_validity)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CmdResult {
    let overrides = parse_sets(&a.set)?;
    let cfg = build_config(Some(&a.config), &overrides)?;
    cfg.validate_training().map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let manifest_path = cfg.manifest.clone().ok_or_else(|| fail(EXIT_USAGE, "config key \"manifest\" is required"))?;
    let ck_path = cfg
        .checkpoint_out
        .clone()
        .ok_or_else(|| fail(EXIT_USAGE, "config key \"checkpoint_out\" is required"))?;
    let log_path = cfg.log_out.clone().unwrap_or_else(|| {
        let mut s = ck_path.clone().into_os_string();
        s.push(".log.tsv");
        PathBuf::from(s)
    });

    let manifest = Manifest::load(&manifest_path).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let (data, report) = TrainData::from_manifest(&manifest, &cfg);
    let w = |e| io_fail(Path::new("stdout"), e);
    writeln!(out, "train_samples = {}", data.train.len()).map_err(w)?;
    writeln!(out, "val_samples = {}", data.val.len()).map_err(w)?;
    write_load_report(out, &report).map_err(w)?;

    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_fail(&log_path, e))?);
    let mut log_err: Option<std::io::Error> = None;
    if let Err(e) = writeln!(log, "{}", EpochRecord::tsv_header(cfg.task)) {
        log_err = Some(e);
    }
    let outcome = train(&cfg, &data, |rec| {
        if log_err.is_none() {
            if let Err(e) = writeln!(log, "{}", rec.to_tsv()) {
                log_err = Some(e);
            }
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ TrainError::EmptySplit(_)) => return Err(fail(EXIT_NO_DATA, e.to_string())),
        Err(e @ TrainError::NonFinite { .. }) => {
            let _ = log.flush();
            return Err(fail(EXIT_DIVERGED, e.to_string()));
        }
        Err(e @ TrainError::Config(_)) => return Err(fail(EXIT_USAGE, e.to_string())),
        Err(e) => return Err(fail(EXIT_USAGE, e.to_string())),
    };
    if let Some(e) = log_err {
        return Err(io_fail(&log_path, e));
    }
    log.flush().map_err(|e| io_fail(&log_path, e))?;

    let bytes = outcome.checkpoint.to_bytes().map_err(|e| fail(EXIT_IO, e.to_string()))?;
    fs::write(&ck_path, bytes).map_err(|e| io_fail(&ck_path, e))?;

    writeln!(out, "epochs = {}", outcome.epochs_run()).map_err(w)?;
    writeln!(out, "best_epoch = {}", outcome.best_epoch).map_err(w)?;
    writeln!(out, "best_metric = {:.6}", outcome.best_metric).map_err(w)?;
    writeln!(out, "checkpoint = {}", ck_path.display()).map_err(w)?;
    writeln!(out, "log = {}", log_path.display()).map_err(w)?;

    if let Some(report_path) = &cfg.report_out {
        let ck = &outcome.checkpoint;
        let report = evaluate(&ck.params, &ck.spec, cfg.task, "val", &data.val, &data.features)
            .map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
        fs::write(report_path, format!("{}\n", report.to_json_line())).map_err(|e| io_fail(report_path, e))?;
        writeln!(out, "report = {}", report_path.display()).map_err(w)?;
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig), Failure> {
    let file = File::open(path).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    let ck = Checkpoint::read_from(std::io::BufReader::new(file))
        .map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    let cfg = config_from_checkpoint(&ck).map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    Ok((ck, cfg))
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let split: Split = a.split.parse().map_err(|e: String| fail(EXIT_USAGE, e))?;
    let (ck, cfg) = load_checkpoint(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let records: Vec<_> = manifest.split_records(split).into_iter().cloned().collect();

    let mut features = HashMap::new();
    let mut report = LoadReport::default();
    let kept = load_split(&records, &cfg, &mut features, &mut report);
    if let Some(fv) = features.values().next() {
        if fv.values.len() != ck.spec.input_dim {
            return Err(fail(
                EXIT_USAGE,
                format!(
                    "checkpoint expects {} input features, frames produce {}",
                    ck.spec.input_dim,
                    fv.values.len()
                ),
            ));
        }
    }
    if kept.is_empty() {
        return Err(fail(EXIT_NO_DATA, format!("no usable samples in the {split} split")));
    }
    let metrics = evaluate(&ck.params, &ck.spec, cfg.task, split.as_str(), &kept, &features).map_err(|e| match e {
        TrainError::InputDim { .. } => fail(EXIT_USAGE, e.to_string()),
        e => fail(EXIT_IO, e.to_string()),
    })?;

    let w = |e| io_fail(Path::new("stdout"), e);
    out.write_all(metrics.to_text().as_bytes()).map_err(w)?;
    write_load_report(out, &report).map_err(w)?;
    let line = metrics.to_json_line();
    match &a.report_out {
        Some(path) => {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| io_fail(path, e))?;
            writeln!(f, "{line}").map_err(|e| io_fail(path, e))?;
        }
        None => writeln!(out, "{line}").map_err(w)?,
    }
    Ok(())
}

fn predict_inputs(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(fail(EXIT_USAGE, format!("{} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| fail(EXIT_USAGE, format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

enum Prediction {
    Class(EmotionClass),
    Va(f64, f64, EmotionClass),
    Invalid,
}

fn predict_one(path: &Path, ck: &Checkpoint, cfg: &RunConfig) -> Result<Prediction, String> {
    let frame = read_frame(path, FrameRef::new("", 0), cfg.parse_options()).map_err(|e| e.to_string())?;
    let Some(person) = select_person(&frame) else {
        return Ok(Prediction::Invalid);
    };
    let fv = to_feature_vector(person, &cfg.normalization);
    if fv.validity < cfg.min_validity {
        return Ok(Prediction::Invalid);
    }
    let x = DenseMatrix::from_vec(1, fv.values.len(), fv.values).map_err(|e| e.to_string())?;
    let (y, _) = forward(&ck.params, &ck.spec, &x).map_err(|e| e.to_string())?;
    Ok(match cfg.task {
        Task::Classify => Prediction::Class(EmotionClass::from_code(predict_class(&y)[0]).map_err(|e| e.to_string())?),
        Task::Va => {
            let (v, a) = (y.get(0, 0), y.get(0, 1));
            Prediction::Va(v, a, va_to_class(v, a, &cfg.va).map_err(|e| e.to_string())?)
        }
    })
}

fn predict(a: PredictArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let (ck, cfg) = load_checkpoint(&a.checkpoint)?;
    if ck.spec.input_dim != crate::keypoint_io::FEATURE_DIM {
        return Err(fail(
            EXIT_USAGE,
            format!(
                "checkpoint expects {} input features, keypoint frames produce {}",
                ck.spec.input_dim,
                crate::keypoint_io::FEATURE_DIM
            ),
        ));
    }
    let files = predict_inputs(&a.input)?;
    if files.is_empty() {
        return Err(fail(EXIT_NO_DATA, format!("no .json files in {}", a.input.display())));
    }
    let w = |e| io_fail(Path::new("stdout"), e);
    let mut failures = 0;
    for path in &files {
        let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match predict_one(path, &ck, &cfg) {
            Ok(Prediction::Class(c)) => writeln!(out, "{id}\t{c}").map_err(w)?,
            Ok(Prediction::Va(v, ar, c)) => writeln!(out, "{id}\t{v:.6}\t{ar:.6}\t{c}").map_err(w)?,
            Ok(Prediction::Invalid) => writeln!(out, "{id}\tinvalid").map_err(w)?,
            Err(e) => {
                failures += 1;
                let _ = writeln!(err, "{id}\terror\t{e}");
            }
        }
    }
    if failures == files.len() {
        return Err(fail(EXIT_NO_DATA, format!("all {failures} files failed")));
    }
    Ok(())
}
