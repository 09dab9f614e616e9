use std::f64::consts::PI;

use super::OptimError;

/// Linear warm-up from `max_lr / div_factor` to `max_lr`, then cosine
/// annealing to `max_lr / final_div_factor` at the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(OptimError::Config("max_lr must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(OptimError::Config("total_steps must be >= 1".into()));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(OptimError::Config("pct_start must be in (0, 1)".into()));
        }
        if !(self.div_factor >= 1.0 && self.final_div_factor >= 1.0) {
            return Err(OptimError::Config("div factors must be >= 1".into()));
        }
        Ok(())
    }

    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div_factor
    }

    /// Step index at which the peak is reached.
    pub fn warmup_steps(&self) -> f64 {
        self.pct_start * self.total_steps as f64
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, OptimError> {
        if step >= self.total_steps {
            return Err(OptimError::Range {
                step,
                total: self.total_steps,
            });
        }
        let s = step as f64;
        let warm = self.warmup_steps();
        let last = (self.total_steps - 1) as f64;
        if s <= warm {
            let frac = if warm > 0.0 { s / warm } else { 1.0 };
            return Ok(self.initial_lr() + (self.max_lr - self.initial_lr()) * frac);
        }
        let span = last - warm;
        let frac = if span > 0.0 { ((s - warm) / span).min(1.0) } else { 1.0 };
        Ok(self.final_lr() + (self.max_lr - self.final_lr()) * 0.5 * (1.0 + (PI * frac).cos()))
    }

    /// Largest possible change in lr between adjacent steps.
    pub fn slope_bound(&self) -> f64 {
        let warm = self.warmup_steps();
        let span = (self.total_steps - 1) as f64 - warm;
        let rise = if warm > 0.0 {
            (self.max_lr - self.initial_lr()) / warm
        } else {
            0.0
        };
        let fall = if span > 0.0 {
            (self.max_lr - self.final_lr()) * PI / 2.0 / span
        } else {
            0.0
        };
        // a step straddling the peak moves at most one step's worth on each side
        rise + fall
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauMode {
    Min,
    Max,
}

impl std::str::FromStr for PlateauMode {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(PlateauMode::Min),
            "max" => Ok(PlateauMode::Max),
            _ => Err(OptimError::Config(format!("unknown plateau mode {s:?}"))),
        }
    }
}

impl PlateauMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlateauMode::Min => "min",
            PlateauMode::Max => "max",
        }
    }
}

/// Multiply the lr by `factor` once the monitored metric has failed to
/// improve for more than `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub mode: PlateauMode,
    /// Relative improvement required.
    pub threshold: f64,
    pub min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64, mode: PlateauMode) -> Self {
        Self {
            lr,
            factor: 0.1,
            patience: 10,
            mode,
            threshold: 1e-4,
            min_lr: 1e-12,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::Config("lr must be positive".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(OptimError::Config("factor must be in (0, 1)".into()));
        }
        if self.min_lr.is_nan() || self.min_lr <= 0.0 {
            return Err(OptimError::Config("min_lr must be positive".into()));
        }
        Ok(())
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    fn improves(&self, metric: f64) -> bool {
        match self.best {
            None => !metric.is_nan(),
            Some(best) => {
                let margin = self.threshold * best.abs();
                match self.mode {
                    PlateauMode::Min => metric < best - margin,
                    PlateauMode::Max => metric > best + margin,
                }
            }
        }
    }

    /// Feed one epoch's metric; returns the lr for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if self.improves(metric) {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scheduler {
    Constant(f64),
    OneCycle(OneCycle),
    Plateau(Plateau),
}

impl Scheduler {
    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::Constant(_) => "constant",
            Scheduler::OneCycle(_) => "onecycle",
            Scheduler::Plateau(_) => "plateau",
        }
    }

    /// Learning rate for the first step.
    pub fn initial_lr(&self) -> f64 {
        match self {
            Scheduler::Constant(lr) => *lr,
            Scheduler::OneCycle(c) => c.initial_lr(),
            Scheduler::Plateau(p) => p.lr,
        }
    }

    /// Per-batch hook. Only the one-cycle schedule changes here.
    pub fn lr_for_step(&self, step: usize, current: f64) -> Result<f64, OptimError> {
        match self {
            Scheduler::OneCycle(c) => c.lr_at(step),
            _ => Ok(current),
        }
    }

    /// Per-epoch hook. Only the plateau schedule changes here.
    pub fn end_epoch(&mut self, metric: f64, current: f64) -> f64 {
        match self {
            Scheduler::Plateau(p) => p.step(metric),
            _ => current,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn onecycle_boundaries() {
        let c = OneCycle::new(0.1, 100);
        c.validate().unwrap();
        assert!((c.lr_at(0).unwrap() - 0.1 / 25.0).abs() < 1e-18);
        assert!((c.lr_at(30).unwrap() - 0.1).abs() < 1e-18);
        assert!((c.lr_at(99).unwrap() - 0.1 / 1e4).abs() < 1e-15);
        assert_eq!(c.lr_at(100), Err(OptimError::Range { step: 100, total: 100 }));
    }

    #[test]
    fn onecycle_is_continuous_and_positive() {
        for total in [2usize, 3, 10, 97, 1000] {
            let c = OneCycle::new(0.05, total);
            let bound = c.slope_bound();
            let lrs: Vec<f64> = (0..total).map(|s| c.lr_at(s).unwrap()).collect();
            assert!(lrs.iter().all(|&lr| lr > 0.0));
            for w in lrs.windows(2) {
                assert!((w[1] - w[0]).abs() <= bound * (1.0 + 1e-12), "total {total}");
            }
        }
    }

    #[test]
    fn plateau_walks_the_counter() {
        let mut p = Plateau {
            patience: 2,
            ..Plateau::new(1.0, PlateauMode::Min)
        };
        // epoch 1 sets the best; epochs 2..4 fail to improve
        let lrs: Vec<f64> = (0..4).map(|_| p.step(1.0)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.1]);
        assert_eq!(p.bad_epochs(), 0);
    }

    #[test]
    fn plateau_threshold_is_relative() {
        let mut p = Plateau {
            patience: 0,
            ..Plateau::new(1.0, PlateauMode::Min)
        };
        p.step(1.0);
        // 1e-5 better is not enough
        assert_eq!(p.step(1.0 - 1e-5), 0.1);
        let mut p = Plateau {
            patience: 0,
            ..Plateau::new(1.0, PlateauMode::Max)
        };
        p.step(0.5);
        assert_eq!(p.step(0.6), 1.0);
        assert_eq!(p.best(), Some(0.6));
    }

    #[test]
    fn plateau_lr_never_increases_or_vanishes() {
        let mut p = Plateau {
            patience: 0,
            ..Plateau::new(1.0, PlateauMode::Min)
        };
        let mut last = p.lr;
        for _ in 0..2000 {
            let lr = p.step(5.0);
            assert!(lr <= last && lr > 0.0);
            last = lr;
        }
    }
}
