//! Training losses and evaluation metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emotion::{EmotionClass, NUM_CLASSES};
use crate::nn::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class index {0} outside 0..=6")]
    Class(usize),
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
}

/// Mean cross-entropy of softmax(logits) against class targets, with the
/// gradient of that mean with respect to the logits.
pub fn cross_entropy(logits: &DenseMatrix, targets: &[usize]) -> Result<(f64, DenseMatrix), MetricsError> {
    if logits.rows() != targets.len() {
        return Err(MetricsError::Shape(format!(
            "{} logit rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let classes = logits.cols();
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(MetricsError::Class(t));
    }
    let n = targets.len() as f64;
    let mut grad = DenseMatrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss += log_sum - (row[t] - max);
        let g = grad.row_mut(r);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum;
            g[j] = (p - if j == t { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean squared error over every entry, with its gradient.
pub fn mse_loss(pred: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix), MetricsError> {
    if pred.shape() != target.shape() {
        return Err(MetricsError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let count = pred.data().len() as f64;
    let mut grad = DenseMatrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for ((g, &p), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - y;
        loss += d * d;
        *g = 2.0 * d / count;
    }
    Ok((loss / count, grad))
}

/// Concordance correlation coefficient with population statistics.
///
/// When the denominator vanishes (< 1e-12) the result is 1.0 for elementwise
/// identical inputs and 0.0 otherwise. A constant input has covariance
/// exactly zero.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<f64, MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: pred.len(),
        });
    }
    let n = pred.len() as f64;
    let mean_x = pred.iter().sum::<f64>() / n;
    let mean_y = target.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (&x, &y) in pred.iter().zip(target) {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (var_x, var_y) = (sxx / n, syy / n);
    let cov = if is_constant(pred) || is_constant(target) {
        0.0
    } else {
        sxy / n
    };
    let shift = mean_x - mean_y;
    let denom = var_x + var_y + shift * shift;
    if denom < 1e-12 {
        return Ok(if pred == target { 1.0 } else { 0.0 });
    }
    Ok((2.0 * cov / denom).clamp(-1.0, 1.0))
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub confusion: ConfusionMatrix,
    pub precision: [f64; NUM_CLASSES],
    pub recall: [f64; NUM_CLASSES],
    pub f1: [f64; NUM_CLASSES],
    pub macro_f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion matrix plus per-class and macro-averaged F1 over all seven classes.
pub fn confusion_and_f1(truth: &[usize], pred: &[usize]) -> Result<ClassificationMetrics, MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::Shape(format!(
            "{} labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(MetricsError::TooShort { need: 1, got: 0 });
    }
    let mut confusion = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= NUM_CLASSES {
            return Err(MetricsError::Class(t));
        }
        if p >= NUM_CLASSES {
            return Err(MetricsError::Class(p));
        }
        confusion.counts[t][p] += 1;
    }
    let mut precision = [0.0; NUM_CLASSES];
    let mut recall = [0.0; NUM_CLASSES];
    let mut f1 = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let tp = confusion.counts[c][c];
        precision[c] = ratio(tp, confusion.col_sum(c));
        recall[c] = ratio(tp, confusion.row_sum(c));
        let s = precision[c] + recall[c];
        f1[c] = if s == 0.0 {
            0.0
        } else {
            2.0 * precision[c] * recall[c] / s
        };
    }
    let macro_f1 = f1.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok(ClassificationMetrics {
        confusion,
        precision,
        recall,
        f1,
        macro_f1,
    })
}

/// Evaluation summary. Classification and regression parts are each optional
/// depending on the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub split: String,
    pub samples: usize,
    pub loss: f64,
    pub classification: Option<ClassificationMetrics>,
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
}

impl MetricsReport {
    /// Flat `key = value` block for humans.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("task", self.task.clone());
        kv("split", self.split.clone());
        kv("samples", self.samples.to_string());
        kv("loss", format!("{:.6}", self.loss));
        if let Some(cm) = &self.classification {
            kv("macro_f1", format!("{:.6}", cm.macro_f1));
            for c in EmotionClass::ALL {
                let i = c.code();
                kv(&format!("precision.{c}"), format!("{:.6}", cm.precision[i]));
                kv(&format!("recall.{c}"), format!("{:.6}", cm.recall[i]));
                kv(&format!("f1.{c}"), format!("{:.6}", cm.f1[i]));
            }
            for c in EmotionClass::ALL {
                let row = cm.confusion.counts[c.code()]
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                kv(&format!("confusion.{c}"), row);
            }
        }
        if let Some(v) = self.ccc_valence {
            kv("ccc_valence", format!("{v:.6}"));
        }
        if let Some(a) = self.ccc_arousal {
            kv("ccc_arousal", format!("{a:.6}"));
        }
        out
    }

    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = mat(2, 7, &[0.3; 14]);
        let (loss, grad) = cross_entropy(&logits, &[0, 5]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((grad.get(0, 0) - (1.0 / 7.0 - 1.0) / 2.0).abs() < 1e-15);
        assert!((grad.get(1, 0) - (1.0 / 7.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_is_stable() {
        let mut data = [0.0; 7];
        data[2] = 1000.0;
        let (loss, grad) = cross_entropy(&mat(1, 7, &data), &[2]).unwrap();
        assert!((0.0..1e-12).contains(&loss));
        assert!(grad.data().iter().all(|g| g.is_finite()));
        let (loss, _) = cross_entropy(&mat(1, 7, &data), &[0]).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        assert_eq!(
            cross_entropy(&mat(1, 7, &[0.0; 7]), &[7]).unwrap_err(),
            MetricsError::Class(7)
        );
        assert!(cross_entropy(&mat(1, 7, &[0.0; 7]), &[0, 1]).is_err());
    }

    #[test]
    fn mse_examples() {
        let (l, g) = mse_loss(&mat(1, 2, &[0.5, -0.5]), &mat(1, 2, &[0.5, -0.5])).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let (l, g) = mse_loss(&mat(1, 2, &[0.0, 0.0]), &mat(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.data(), &[-1.0, -1.0]);
        assert!(mse_loss(&mat(1, 2, &[0.0; 2]), &mat(2, 1, &[0.0; 2])).is_err());
    }

    #[test]
    fn ccc_degenerate_rules() {
        let x = [0.1, 0.4, 0.3, -0.2];
        assert_eq!(ccc(&x, &x).unwrap(), 1.0);
        assert_eq!(ccc(&[0.1; 4], &x).unwrap(), 0.0);
        assert_eq!(ccc(&[0.3; 3], &[0.3; 3]).unwrap(), 1.0);
        assert_eq!(ccc(&[0.3; 3], &[0.3, 0.3, 0.3 + 1e-9]).unwrap(), 0.0);
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn ccc_penalizes_shift_unlike_pearson() {
        let x = [0.1, 0.4, 0.3, -0.2];
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        let c = ccc(&shifted, &x).unwrap();
        assert!(c < 1.0 && c > 0.0);
    }

    #[test]
    fn f1_examples() {
        let all: Vec<usize> = (0..7).chain(0..7).collect();
        assert_eq!(confusion_and_f1(&all, &all).unwrap().macro_f1, 1.0);

        let m = confusion_and_f1(&[0; 5], &[0; 5]).unwrap();
        assert_eq!(m.f1[0], 1.0);
        assert!((m.macro_f1 - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(m.confusion.total(), 5);

        assert_eq!(confusion_and_f1(&[0, 1], &[1, 0]).unwrap().macro_f1, 0.0);
    }

    #[test]
    fn f1_hand_evaluated() {
        // class 0: tp 2, fp 1, fn 0 -> P 2/3, R 1, F1 0.8
        // class 1: tp 1, fp 0, fn 1 -> P 1, R 1/2, F1 2/3
        let m = confusion_and_f1(&[0, 0, 1, 1], &[0, 0, 1, 0]).unwrap();
        assert!((m.f1[0] - 0.8).abs() < 1e-15);
        assert!((m.f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.macro_f1 - (0.8 + 2.0 / 3.0) / 7.0).abs() < 1e-15);
    }

    #[test]
    fn f1_errors() {
        assert!(confusion_and_f1(&[], &[]).is_err());
        assert!(confusion_and_f1(&[0], &[0, 1]).is_err());
        assert_eq!(confusion_and_f1(&[9], &[0]).unwrap_err(), MetricsError::Class(9));
    }

    #[test]
    fn report_json_is_one_object() {
        let report = MetricsReport {
            task: "classify".into(),
            split: "val".into(),
            samples: 2,
            loss: 0.5,
            classification: Some(confusion_and_f1(&[0, 1], &[0, 1]).unwrap()),
            ccc_valence: None,
            ccc_arousal: None,
        };
        let line = report.to_json_line();
        assert!(!line.contains('\n'));
        let back: MetricsReport = serde_json::from_str(&line).unwrap();
        assert_eq!(back, report);
        assert!(report.to_text().contains("macro_f1 = "));
    }
}
