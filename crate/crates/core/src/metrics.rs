//! Classification metrics and aggregation of repeated runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[t][p]` = number of samples with true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::LengthMismatch(c, rows.iter().map(Vec::len).max().unwrap_or(0)));
        }
        Ok(Self {
            n_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.n_classes).map(|t| self.get(t, class)).sum()
    }
}

pub fn confusion_matrix(truth: &[usize], preds: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != preds.len() || truth.is_empty() {
        return Err(Error::LengthMismatch(truth.len(), preds.len()));
    }
    let mut counts = vec![0u64; n_classes * n_classes];
    for (&t, &p) in truth.iter().zip(preds) {
        if t >= n_classes {
            return Err(Error::BadLabel(t.to_string()));
        }
        if p >= n_classes {
            return Err(Error::BadLabel(p.to_string()));
        }
        counts[t * n_classes + p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Mean recall over the classes that occur in the ground truth.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let recalls: Vec<f64> = (0..cm.n_classes())
        .filter_map(|c| {
            let support = cm.support(c);
            (support > 0).then(|| cm.get(c, c) as f64 / support as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(Error::NoSupportedClasses);
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Support-weighted mean of per-class F1; a class with `P + R = 0` scores 0.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::NoSupportedClasses);
    }
    let mut acc = 0.0;
    for c in 0..cm.n_classes() {
        let support = cm.support(c);
        if support == 0 {
            continue;
        }
        let tp = cm.get(c, c) as f64;
        let predicted = cm.predicted(c);
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = tp / support as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        acc += support as f64 * f1;
    }
    Ok(acc / total as f64)
}

/// Mean and population standard deviation of per-run values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mean: f64,
    pub std: f64,
}

impl RunSummary {
    /// `"mean±std"` in percent with two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunSummary> {
    if values.is_empty() {
        return Err(Error::EmptyRuns);
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
    Ok(RunSummary {
        mean,
        std: var.sqrt(),
    })
}

/// Rounds to two decimals of a percentage, as reported in result tables.
pub fn percent2(v: f64) -> f64 {
    (v * 10_000.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_cm() -> ConfusionMatrix {
        confusion_matrix(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 2).unwrap()
    }

    #[test]
    fn confusion_by_hand() {
        let cm = hand_cm();
        assert_eq!(cm, ConfusionMatrix::from_counts(&[vec![1, 1], vec![1, 2]]).unwrap());
        let perfect = confusion_matrix(&[0, 1], &[0, 1], 2).unwrap();
        assert_eq!((perfect.get(0, 0), perfect.get(1, 1), perfect.get(0, 1)), (1, 1, 0));
        assert!(matches!(confusion_matrix(&[], &[], 2), Err(Error::LengthMismatch(0, 0))));
        assert!(matches!(confusion_matrix(&[0, 2], &[0, 1], 2), Err(Error::BadLabel(_))));
    }

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(balanced_accuracy(&confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap()).unwrap(), 1.0);
        let b = balanced_accuracy(&hand_cm()).unwrap();
        assert!((b - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        let constant = confusion_matrix(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(balanced_accuracy(&constant).unwrap(), 0.5);
        let empty = ConfusionMatrix::from_counts(&[vec![0, 0], vec![0, 0]]).unwrap();
        assert!(matches!(balanced_accuracy(&empty), Err(Error::NoSupportedClasses)));
    }

    #[test]
    fn weighted_f1_cases() {
        assert_eq!(weighted_f1(&confusion_matrix(&[0, 1], &[0, 1], 2).unwrap()).unwrap(), 1.0);
        let f = weighted_f1(&hand_cm()).unwrap();
        assert!((f - 0.6).abs() < 1e-15);
        // class 2 never true and never predicted: weight 0
        let cm = confusion_matrix(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0], 3).unwrap();
        assert!((weighted_f1(&cm).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn run_aggregation() {
        assert_eq!(aggregate_runs(&[0.5]).unwrap(), RunSummary { mean: 0.5, std: 0.0 });
        let s = aggregate_runs(&[0.4, 0.6]).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15 && (s.std - 0.1).abs() < 1e-15);
        assert_eq!(aggregate_runs(&[0.7; 4]).unwrap().std, 0.0);
        assert!(matches!(aggregate_runs(&[]), Err(Error::EmptyRuns)));
        assert_eq!(RunSummary { mean: 0.563149, std: 0.0166 }.percent(), "56.31±1.66");
        assert_eq!(percent2(0.563149), 56.31);
    }
}
