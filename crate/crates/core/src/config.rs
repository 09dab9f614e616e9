//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key except the
//! file paths has a default; unknown keys are rejected so typos surface
//! immediately. Command-line `--set key=value` overrides are applied on top
//! of the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::emotion::{EmotionClass, VaThresholds};
use crate::keypoint_io::{FrameNamePattern, NormalizationConfig, ParseOptions};
use crate::nn::{Head, NetworkSpec, Topology, DEFAULT_HIDDEN};
use crate::optim::{Hyperparams, OneCycle, OptimizerKind, Plateau, PlateauMode, Scheduler};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: {message}")]
    Invalid { key: String, message: String },
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config key {0:?} is required")]
    Missing(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Va,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Va => "va",
        }
    }

    pub fn head(self) -> Head {
        match self {
            Task::Classify => Head::Classifier7,
            Task::Va => Head::Va2,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classify" => Ok(Task::Classify),
            "va" => Ok(Task::Va),
            _ => Err(format!("expected classify or va, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    Constant,
    OneCycle,
    Plateau,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,

    pub root: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub log_out: Option<PathBuf>,

    pub stride: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub frame_pattern: String,
    pub strict_layout: bool,
    pub normalization: NormalizationConfig,
    pub min_validity: f64,

    pub epochs: usize,
    pub batch_size: usize,
    /// Stop once the validation metric reaches this value.
    pub target_metric: Option<f64>,

    pub topology: Topology,
    pub hidden: Vec<usize>,

    pub optimizer: OptimizerKind,
    /// `None` means the optimizer's own default.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    pub scheduler: SchedulerKind,
    pub max_lr: Option<f64>,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub factor: f64,
    pub patience: usize,
    pub mode: PlateauMode,

    pub va: VaThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Classify,
            root: None,
            labels: None,
            manifest: None,
            checkpoint_out: None,
            report_out: None,
            log_out: None,
            stride: 10,
            val_fraction: 0.2,
            seed: 0,
            frame_pattern: FrameNamePattern::DEFAULT.to_string(),
            strict_layout: true,
            normalization: NormalizationConfig::default(),
            min_validity: 0.5,
            epochs: 50,
            batch_size: 32,
            target_metric: None,
            topology: Topology::Plain,
            hidden: DEFAULT_HIDDEN.to_vec(),
            optimizer: OptimizerKind::Adam,
            lr: None,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scheduler: SchedulerKind::Constant,
            max_lr: None,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            factor: 0.1,
            patience: 10,
            mode: PlateauMode::Min,
            va: VaThresholds::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Invalid {
        key: key.to_string(),
        message: format!("cannot parse {value:?}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Invalid {
            key: key.to_string(),
            message: format!("expected true or false, got {value:?}"),
        }),
    }
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError> {
    if value == "none" || value == "default" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Split a config file into `(key, value)` pairs, rejecting duplicates.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if pairs.iter().any(|(existing, _)| existing == k) {
            return Err(ConfigError::Syntax {
                line: i + 1,
                message: format!("duplicate key {k:?}"),
            });
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

/// Parse a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| ConfigError::Syntax {
            line: 0,
            message: format!("override {s:?} is not key=value"),
        })
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    /// Apply one key. Every accepted key is listed here.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "task" => self.task = value.parse().map_err(|m: String| invalid(key, m))?,
            "root" => self.root = Some(PathBuf::from(value)),
            "labels" => self.labels = Some(PathBuf::from(value)),
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "checkpoint_out" => self.checkpoint_out = Some(PathBuf::from(value)),
            "report_out" => self.report_out = Some(PathBuf::from(value)),
            "log_out" => self.log_out = Some(PathBuf::from(value)),
            "stride" => self.stride = parse_value(key, value)?,
            "val_fraction" => self.val_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "frame_pattern" => {
                FrameNamePattern::new(value).map_err(|e| invalid(key, e.to_string()))?;
                self.frame_pattern = value.to_string();
            }
            "strict_layout" => self.strict_layout = parse_bool(key, value)?,
            "anchor" => self.normalization.anchor = parse_value(key, value)?,
            "image_diagonal" => self.normalization.image_diagonal = parse_value(key, value)?,
            "scale_eps" => self.normalization.eps = parse_value(key, value)?,
            "include_confidence" => self.normalization.include_confidence = parse_bool(key, value)?,
            "min_validity" => self.min_validity = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "target_metric" => self.target_metric = parse_optional(key, value)?,
            "topology" => self.topology = value.parse().map_err(|e: crate::nn::NnError| invalid(key, e.to_string()))?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse_value::<usize>(key, w.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "optimizer" => {
                self.optimizer = value
                    .parse()
                    .map_err(|e: crate::optim::OptimError| invalid(key, e.to_string()))?
            }
            "lr" => self.lr = parse_optional(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "scheduler" => {
                self.scheduler = match value {
                    "constant" => SchedulerKind::Constant,
                    "onecycle" => SchedulerKind::OneCycle,
                    "plateau" => SchedulerKind::Plateau,
                    _ => return Err(invalid(key, format!("expected constant, onecycle or plateau, got {value:?}"))),
                }
            }
            "max_lr" => self.max_lr = parse_optional(key, value)?,
            "pct_start" => self.pct_start = parse_value(key, value)?,
            "div_factor" => self.div_factor = parse_value(key, value)?,
            "final_div_factor" => self.final_div_factor = parse_value(key, value)?,
            "factor" => self.factor = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "mode" => {
                self.mode = value
                    .parse()
                    .map_err(|e: crate::optim::OptimError| invalid(key, e.to_string()))?
            }
            "neutral_radius" => self.va.neutral_radius = parse_value(key, value)?,
            _ => {
                if let Some(name) = key.strip_prefix("proto.") {
                    let class: EmotionClass = name.parse().map_err(|_| ConfigError::UnknownKey(key.to_string()))?;
                    let (v, a) = value
                        .split_once(',')
                        .ok_or_else(|| invalid(key, "expected valence,arousal"))?;
                    self.va.prototypes[class.code()] = (parse_value(key, v.trim())?, parse_value(key, a.trim())?);
                } else {
                    return Err(ConfigError::UnknownKey(key.to_string()));
                }
            }
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, overrides: &[(String, String)]) -> Result<(), ConfigError> {
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Cross-field checks for training.
    pub fn validate_training(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.min_validity) {
            return Err(invalid("min_validity", "must be in [0, 1]"));
        }
        if self.normalization.image_diagonal <= 0.0 || !self.normalization.image_diagonal.is_finite() {
            return Err(invalid("image_diagonal", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "widths must be >= 1"));
        }
        self.hyperparams().validate().map_err(|e| invalid("optimizer", e.to_string()))?;
        self.va.validate().map_err(|e| invalid("proto", e.to_string()))?;
        Ok(())
    }

    pub fn validate_ingest(&self) -> Result<(), ConfigError> {
        if self.stride == 0 {
            return Err(invalid("stride", "must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(invalid("val_fraction", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn network_spec(&self, input_dim: usize) -> NetworkSpec {
        NetworkSpec::new(input_dim, self.topology, self.hidden.clone(), self.task.head())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            lr: self.lr.unwrap_or_else(|| self.optimizer.default_lr()),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            momentum: self.momentum,
        }
    }

    pub fn parse_options(&self) -> ParseOptions {
        ParseOptions {
            strict_layout: self.strict_layout,
        }
    }

    pub fn frame_name_pattern(&self) -> FrameNamePattern {
        FrameNamePattern::new(&self.frame_pattern).expect("validated when set")
    }

    /// Build the learning-rate schedule for a run of `total_steps` batches.
    pub fn scheduler(&self, total_steps: usize) -> Result<Scheduler, ConfigError> {
        let lr = self.hyperparams().lr;
        match self.scheduler {
            SchedulerKind::Constant => Ok(Scheduler::Constant(lr)),
            SchedulerKind::OneCycle => {
                let c = OneCycle {
                    max_lr: self.max_lr.unwrap_or(lr),
                    total_steps,
                    pct_start: self.pct_start,
                    div_factor: self.div_factor,
                    final_div_factor: self.final_div_factor,
                };
                c.validate().map_err(|e| invalid("scheduler", e.to_string()))?;
                Ok(Scheduler::OneCycle(c))
            }
            SchedulerKind::Plateau => {
                let mut p = Plateau::new(lr, self.mode);
                p.factor = self.factor;
                p.patience = self.patience;
                p.validate().map_err(|e| invalid("scheduler", e.to_string()))?;
                Ok(Scheduler::Plateau(p))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::from_text(
            "# experiment\n\
             task = va\n\
             hidden = 64, 32\n\
             optimizer = adamax\n\
             manifest = data/manifest.tsv\n\
             proto.fear = -0.5, 0.9\n",
        )
        .unwrap();
        assert_eq!(cfg.task, Task::Va);
        assert_eq!(cfg.hidden, vec![64, 32]);
        assert_eq!(cfg.hyperparams().lr, 0.002);
        assert_eq!(cfg.manifest.as_deref(), Some(Path::new("data/manifest.tsv")));
        assert_eq!(cfg.va.prototypes[EmotionClass::Fear.code()], (-0.5, 0.9));
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.network_spec(285).head, Head::Va2);

        let mut cfg = cfg;
        cfg.apply_overrides(&[parse_override("lr=0.05").unwrap()]).unwrap();
        assert_eq!(cfg.hyperparams().lr, 0.05);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert_eq!(
            RunConfig::from_text("epoch = 3\n").unwrap_err(),
            ConfigError::UnknownKey("epoch".into())
        );
        assert!(matches!(
            RunConfig::from_text("proto.joy = 0,0\n"),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(RunConfig::from_text("epochs 3\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            RunConfig::from_text("epochs = 3\nepochs = 4\n"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(RunConfig::from_text("epochs = many\n"), Err(ConfigError::Invalid { .. })));
        assert!(RunConfig::from_text("frame_pattern = (\n").is_err());
    }

    #[test]
    fn training_validation() {
        let mut cfg = RunConfig::default();
        cfg.validate_training().unwrap();
        cfg.set("epochs", "0").unwrap();
        assert!(matches!(cfg.validate_training(), Err(ConfigError::Invalid { ref key, .. }) if key == "epochs"));
    }

    #[test]
    fn scheduler_construction() {
        let mut cfg = RunConfig::default();
        cfg.set("scheduler", "onecycle").unwrap();
        cfg.set("max_lr", "0.01").unwrap();
        match cfg.scheduler(100).unwrap() {
            Scheduler::OneCycle(c) => assert_eq!(c.max_lr, 0.01),
            s => panic!("unexpected {s:?}"),
        }
        cfg.set("scheduler", "plateau").unwrap();
        cfg.set("patience", "3").unwrap();
        match cfg.scheduler(100).unwrap() {
            Scheduler::Plateau(p) => assert_eq!(p.patience, 3),
            s => panic!("unexpected {s:?}"),
        }
        assert!(cfg.set("scheduler", "cosine").is_err());
    }
}
