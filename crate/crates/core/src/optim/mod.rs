//! First-order optimizers and learning-rate schedules.

mod scheduler;

pub use scheduler::{OneCycle, Plateau, PlateauMode, Scheduler};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::nn::NetworkParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("step {step} outside schedule of {total} steps")]
    Range { step: usize, total: usize },
    #[error("invalid hyperparameter: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdaMax,
}

impl OptimizerKind {
    /// Learning rate used when none is configured.
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.01,
            OptimizerKind::Adam => 0.001,
            OptimizerKind::AdaMax => 0.002,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdaMax => "adamax",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamax" => Ok(OptimizerKind::AdaMax),
            _ => Err(OptimError::Config(format!("unknown optimizer {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD only.
    pub momentum: f64,
}

impl Hyperparams {
    pub fn defaults(kind: OptimizerKind) -> Self {
        Self {
            lr: kind.default_lr(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(OptimError::Config(what.to_string()))
            }
        };
        check(self.lr > 0.0 && self.lr.is_finite(), "lr must be a positive number")?;
        check((0.0..1.0).contains(&self.beta1), "beta1 must be in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2 must be in [0, 1)")?;
        check(self.eps >= 0.0 && self.eps.is_finite(), "eps must be >= 0")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)")
    }
}

/// Optimizer state. Moment buffers are allocated on the first step to
/// match the parameter tensors and checked on every later step.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub hp: Hyperparams,
    step_count: u64,
    /// First moment (Adam, AdaMax) or momentum buffer (SGD).
    m: Vec<Vec<f64>>,
    /// Second moment (Adam) or infinity norm (AdaMax).
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hp: Hyperparams) -> Result<Self, OptimError> {
        hp.validate()?;
        Ok(Self {
            kind,
            hp,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn with_defaults(kind: OptimizerKind) -> Self {
        Self::new(kind, Hyperparams::defaults(kind)).expect("defaults are valid")
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn lr(&self) -> f64 {
        self.hp.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hp.lr = lr;
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update over a list of parameter tensors and matching gradients.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::Contract(format!(
                "{} parameter tensors vs {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(OptimError::Contract(format!(
                    "tensor {i}: {} parameters vs {} gradients",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(OptimError::Contract("parameter shapes changed between steps".into()));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let Hyperparams {
            lr,
            beta1,
            beta2,
            eps,
            momentum,
        } = self.hp;

        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            match self.kind {
                OptimizerKind::Sgd => {
                    if momentum == 0.0 {
                        for (p, &g) in p.iter_mut().zip(*g) {
                            *p -= lr * g;
                        }
                    } else {
                        for ((p, &g), buf) in p.iter_mut().zip(*g).zip(m.iter_mut()) {
                            *buf = momentum * *buf + g;
                            *p -= lr * *buf;
                        }
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, &g), m), v) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        let denom = v_hat.sqrt() + eps;
                        if denom > 0.0 {
                            *p -= lr * m_hat / denom;
                        }
                    }
                }
                OptimizerKind::AdaMax => {
                    let step = lr / (1.0 - beta1.powi(t));
                    for (((p, &g), m), u) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *u = (beta2 * *u).max(g.abs());
                        let denom = *u + eps;
                        if denom > 0.0 {
                            *p -= step * *m / denom;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Apply one update to a network using gradients of the same layout.
    pub fn step_network(&mut self, params: &mut NetworkParams, grads: &NetworkParams) -> Result<(), OptimError> {
        let g = grads.tensors();
        let mut p = params.tensors_mut();
        self.step(&mut p, &g)
    }
}
