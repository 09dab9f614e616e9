//! Training loop, evaluation and checkpoint bookkeeping.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::{debug, info};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, Task};
use crate::dataset::{batch_iter, Batch, BatchConfig, Label, Manifest, SampleRecord, Split};
use crate::emotion::EmotionClass;
use crate::keypoint_io::{read_frame, select_person, to_feature_vector, FeatureVector};
use crate::metrics::{ccc, confusion_and_f1, cross_entropy, mse_loss, MetricsError, MetricsReport};
use crate::nn::{backward, forward, init_network, predict_class, Checkpoint, DenseMatrix, NetworkParams, NetworkSpec, NnError};
use crate::optim::{OptimError, Optimizer, Scheduler};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0} split has no usable samples")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("feature width {got} does not match network input {expected}")]
    InputDim { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Records for both splits plus their loaded feature vectors, keyed by frame path.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub features: HashMap<PathBuf, FeatureVector>,
}

/// What happened while loading frames for training or evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub unlabeled: usize,
    pub unreadable: usize,
    pub low_validity: usize,
}

fn has_label(task: Task, r: &SampleRecord) -> bool {
    match task {
        Task::Classify => r.expr_label.is_some(),
        Task::Va => r.va_label.is_some(),
    }
}

/// Read and normalize one frame. A frame with nobody in it yields the
/// all-zero vector with validity 0.
pub fn load_features(path: &Path, record: &SampleRecord, cfg: &RunConfig) -> Result<FeatureVector, String> {
    let frame = read_frame(path, record.frame_ref(), cfg.parse_options()).map_err(|e| e.to_string())?;
    Ok(match select_person(&frame) {
        Some(p) => to_feature_vector(p, &cfg.normalization),
        None => FeatureVector::empty_frame(),
    })
}

/// Load every labeled, sufficiently valid frame of one split.
pub fn load_split(
    records: &[SampleRecord],
    cfg: &RunConfig,
    features: &mut HashMap<PathBuf, FeatureVector>,
    report: &mut LoadReport,
) -> Vec<SampleRecord> {
    let mut kept = Vec::new();
    for r in records {
        if !has_label(cfg.task, r) {
            report.unlabeled += 1;
            continue;
        }
        match load_features(&r.frame_path, r, cfg) {
            Ok(fv) if fv.validity < cfg.min_validity => report.low_validity += 1,
            Ok(fv) => {
                features.insert(r.frame_path.clone(), fv);
                kept.push(r.clone());
            }
            Err(e) => {
                debug!("skipping {}: {e}", r.frame_path.display());
                report.unreadable += 1;
            }
        }
    }
    kept
}

impl TrainData {
    pub fn from_manifest(manifest: &Manifest, cfg: &RunConfig) -> (Self, LoadReport) {
        let mut data = TrainData::default();
        let mut report = LoadReport::default();
        let train: Vec<SampleRecord> = manifest.split_records(Split::Train).into_iter().cloned().collect();
        let val: Vec<SampleRecord> = manifest.split_records(Split::Val).into_iter().cloned().collect();
        data.train = load_split(&train, cfg, &mut data.features, &mut report);
        data.val = load_split(&val, cfg, &mut data.features, &mut report);
        (data, report)
    }

    /// Build from in-memory vectors. Each sample gets a synthetic path and
    /// validity 1.
    pub fn in_memory(train: Vec<(Vec<f64>, Label)>, val: Vec<(Vec<f64>, Label)>) -> Self {
        let mut data = TrainData::default();
        for (split, samples) in [(Split::Train, train), (Split::Val, val)] {
            for (i, (values, label)) in samples.into_iter().enumerate() {
                let path = PathBuf::from(format!("memory/{}/{i}", split.as_str()));
                let (expr_label, va_label) = match label {
                    Label::Expr(c) => (Some(c), None),
                    Label::Va(v, a) => (None, Some((v, a))),
                };
                let record = SampleRecord {
                    frame_path: path.clone(),
                    video_id: split.as_str().to_string(),
                    frame_index: i as u64,
                    expr_label,
                    va_label,
                    split,
                };
                data.features.insert(path, FeatureVector { values, validity: 1.0 });
                match split {
                    Split::Train => data.train.push(record),
                    Split::Val => data.val.push(record),
                }
            }
        }
        data
    }

    fn input_dim(&self) -> Option<usize> {
        self.train.first().and_then(|r| self.features.get(&r.frame_path)).map(|f| f.values.len())
    }

    fn lookup(&self) -> impl FnMut(&Path) -> Result<FeatureVector, ()> + '_ {
        move |p: &Path| self.features.get(p).cloned().ok_or(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_f1: Option<f64>,
    pub val_ccc: Option<(f64, f64)>,
    /// Learning rate in effect at the end of the epoch.
    pub lr: f64,
}

impl EpochRecord {
    pub fn tsv_header(task: Task) -> &'static str {
        match task {
            Task::Classify => "epoch\ttrain_loss\tval_loss\tval_macro_f1\tlr",
            Task::Va => "epoch\ttrain_loss\tval_loss\tval_ccc_v\tval_ccc_a\tlr",
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\t{:.6}\t{:.6}", self.epoch, self.train_loss, self.val_loss);
        if let Some(f1) = self.val_macro_f1 {
            s.push_str(&format!("\t{f1:.6}"));
        }
        if let Some((v, a)) = self.val_ccc {
            s.push_str(&format!("\t{v:.6}\t{a:.6}"));
        }
        s.push_str(&format!("\t{:e}", self.lr));
        s
    }

    /// The model-selection metric: macro-F1 or mean CCC.
    pub fn metric(&self) -> f64 {
        match (self.val_macro_f1, self.val_ccc) {
            (Some(f1), _) => f1,
            (None, Some((v, a))) => (v + a) / 2.0,
            (None, None) => f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.log.len()
    }

    /// First epoch whose validation metric reached `target`, if any.
    pub fn first_epoch_reaching(&self, target: f64) -> Option<usize> {
        self.log.iter().find(|r| r.metric() >= target).map(|r| r.epoch)
    }
}

fn batch_targets(task: Task, batch: &Batch) -> Result<Targets, TrainError> {
    match task {
        Task::Classify => Ok(Targets::Classes(
            batch.expr.iter().map(|l| l.expect("records are filtered by label")).collect(),
        )),
        Task::Va => {
            let flat: Vec<f64> = batch
                .va
                .iter()
                .flat_map(|l| {
                    let (v, a) = l.expect("records are filtered by label");
                    [v, a]
                })
                .collect();
            Ok(Targets::Va(DenseMatrix::from_vec(batch.len(), 2, flat)?))
        }
    }
}

enum Targets {
    Classes(Vec<usize>),
    Va(DenseMatrix),
}

fn loss_and_grad(output: &DenseMatrix, targets: &Targets) -> Result<(f64, DenseMatrix), TrainError> {
    Ok(match targets {
        Targets::Classes(c) => cross_entropy(output, c)?,
        Targets::Va(t) => mse_loss(output, t)?,
    })
}

/// Evaluate a network on a stream of batches.
pub fn evaluate_batches(
    params: &NetworkParams,
    spec: &NetworkSpec,
    task: Task,
    split: &str,
    batches: impl Iterator<Item = Batch>,
) -> Result<MetricsReport, TrainError> {
    let mut loss_sum = 0.0;
    let mut n = 0usize;
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    let (mut v_pred, mut v_true, mut a_pred, mut a_true) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for batch in batches {
        if batch.inputs.cols() != spec.input_dim {
            return Err(TrainError::InputDim {
                expected: spec.input_dim,
                got: batch.inputs.cols(),
            });
        }
        let (out, _) = forward(params, spec, &batch.inputs)?;
        let targets = batch_targets(task, &batch)?;
        let (loss, _) = loss_and_grad(&out, &targets)?;
        loss_sum += loss * batch.len() as f64;
        n += batch.len();
        match targets {
            Targets::Classes(c) => {
                pred.extend(predict_class(&out));
                truth.extend(c);
            }
            Targets::Va(t) => {
                for i in 0..batch.len() {
                    v_pred.push(out.get(i, 0));
                    a_pred.push(out.get(i, 1));
                    v_true.push(t.get(i, 0));
                    a_true.push(t.get(i, 1));
                }
            }
        }
    }
    let mut report = MetricsReport {
        task: task.as_str().to_string(),
        split: split.to_string(),
        samples: n,
        loss: if n > 0 { loss_sum / n as f64 } else { f64::NAN },
        classification: None,
        ccc_valence: None,
        ccc_arousal: None,
    };
    if n == 0 {
        return Ok(report);
    }
    match task {
        Task::Classify => report.classification = Some(confusion_and_f1(&truth, &pred)?),
        Task::Va => {
            report.ccc_valence = Some(ccc(&v_pred, &v_true)?);
            report.ccc_arousal = Some(ccc(&a_pred, &a_true)?);
        }
    }
    Ok(report)
}

/// Evaluate on in-memory records in manifest order.
pub fn evaluate(
    params: &NetworkParams,
    spec: &NetworkSpec,
    task: Task,
    split: &str,
    records: &[SampleRecord],
    features: &HashMap<PathBuf, FeatureVector>,
) -> Result<MetricsReport, TrainError> {
    let cfg = BatchConfig {
        batch_size: 256,
        shuffle_seed: None,
        min_validity: 0.0,
    };
    let iter = batch_iter(records, &cfg, 0, |p: &Path| features.get(p).cloned().ok_or(())).expect("batch size is positive");
    evaluate_batches(params, spec, task, split, iter)
}

/// Config keys copied into checkpoint metadata so evaluation and prediction
/// reproduce the training-time preprocessing.
pub const CHECKPOINT_CONFIG_KEYS: [&str; 7] = [
    "task",
    "anchor",
    "image_diagonal",
    "scale_eps",
    "include_confidence",
    "strict_layout",
    "min_validity",
];

fn checkpoint_metadata(cfg: &RunConfig, best_epoch: usize, best_metric: f64) -> Vec<(String, String)> {
    let mut meta: Vec<(String, String)> = vec![
        ("task".into(), cfg.task.as_str().into()),
        ("anchor".into(), cfg.normalization.anchor.to_string()),
        ("image_diagonal".into(), cfg.normalization.image_diagonal.to_string()),
        ("scale_eps".into(), cfg.normalization.eps.to_string()),
        ("include_confidence".into(), cfg.normalization.include_confidence.to_string()),
        ("strict_layout".into(), cfg.strict_layout.to_string()),
        ("min_validity".into(), cfg.min_validity.to_string()),
        ("neutral_radius".into(), cfg.va.neutral_radius.to_string()),
    ];
    for c in EmotionClass::ALL {
        let (v, a) = cfg.va.prototypes[c.code()];
        meta.push((format!("proto.{}", c.name()), format!("{v},{a}")));
    }
    meta.extend([
        ("seed".into(), cfg.seed.to_string()),
        ("optimizer".into(), cfg.optimizer.as_str().into()),
        ("best_epoch".into(), best_epoch.to_string()),
        ("best_metric".into(), best_metric.to_string()),
    ]);
    meta
}

/// Rebuild the preprocessing settings stored in a checkpoint.
pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (k, v) in &ck.metadata {
        if CHECKPOINT_CONFIG_KEYS.contains(&k.as_str()) || k == "neutral_radius" || k.starts_with("proto.") {
            cfg.set(k, v)?;
        }
    }
    if cfg.task.head() != ck.spec.head {
        return Err(ConfigError::Invalid {
            key: "task".into(),
            message: format!("metadata says {} but the network head is {}", cfg.task, ck.spec.head),
        });
    }
    Ok(cfg)
}

/// Train a network. `on_epoch` sees every log record as soon as it is produced.
pub fn train(
    cfg: &RunConfig,
    data: &TrainData,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate_training()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let input_dim = data.input_dim().ok_or(TrainError::EmptySplit("train"))?;
    let spec = cfg.network_spec(input_dim);
    spec.validate()?;

    let mut params = init_network(&spec, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.hyperparams())?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let mut scheduler: Scheduler = cfg.scheduler(steps_per_epoch * cfg.epochs)?;
    opt.set_lr(scheduler.initial_lr());

    let batch_cfg = BatchConfig {
        batch_size: cfg.batch_size,
        shuffle_seed: Some(cfg.seed),
        min_validity: cfg.min_validity,
    };
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, NetworkParams)> = None;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let iter = batch_iter(&data.train, &batch_cfg, epoch as u64, data.lookup()).expect("batch size validated");
        for (b, batch) in iter.enumerate() {
            let non_finite = || TrainError::NonFinite { epoch, batch: b + 1 };
            let lr = scheduler.lr_for_step(step, opt.lr())?;
            opt.set_lr(lr);
            let (out, cache) = match forward(&params, &spec, &batch.inputs) {
                Err(NnError::NonFinite(_)) => return Err(non_finite()),
                r => r?,
            };
            let (loss, mut grad) = loss_and_grad(&out, &batch_targets(cfg.task, &batch)?)?;
            if !loss.is_finite() {
                return Err(non_finite());
            }
            // the loss gradient is already a batch mean and backward averages again
            grad.scale(batch.len() as f64);
            let grads = backward(&params, &spec, &cache, &grad)?;
            if !grads.all_finite() {
                return Err(non_finite());
            }
            opt.step_network(&mut params, &grads)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }

        let val = match evaluate(&params, &spec, cfg.task, "val", &data.val, &data.features) {
            Err(TrainError::Nn(NnError::NonFinite(_))) => {
                return Err(TrainError::NonFinite { epoch, batch: 0 });
            }
            r => r?,
        };
        let mut record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss: val.loss,
            val_macro_f1: val.classification.as_ref().map(|c| c.macro_f1),
            val_ccc: val.ccc_valence.zip(val.ccc_arousal),
            lr: opt.lr(),
        };
        let metric = record.metric();
        let monitored = match cfg.mode {
            crate::optim::PlateauMode::Min => record.val_loss,
            crate::optim::PlateauMode::Max => metric,
        };
        let next_lr = scheduler.end_epoch(monitored, opt.lr());
        opt.set_lr(next_lr);
        record.lr = next_lr;
        info!("{}", record.to_tsv());
        on_epoch(&record);

        if best.as_ref().is_none_or(|(_, m, _)| metric > *m) {
            best = Some((epoch, metric, params.clone()));
        }
        log.push(record);
        if cfg.target_metric.is_some_and(|t| metric >= t) {
            break;
        }
    }

    let (best_epoch, best_metric, best_params) = best.expect("at least one epoch ran");
    let mut checkpoint = Checkpoint::new(spec, best_params);
    checkpoint.metadata = checkpoint_metadata(cfg, best_epoch, best_metric);
    Ok(TrainOutcome {
        checkpoint,
        log,
        best_epoch,
        best_metric,
        train_samples: data.train.len(),
        val_samples: data.val.len(),
    })
}
