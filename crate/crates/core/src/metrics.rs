//! Confusion matrices and the metrics derived from them.

use serde::{Deserialize, Serialize};

use crate::taxonomy::LabelMask;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("SHAPE_MISMATCH: prediction {pred:?} vs target {target:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        target: (usize, usize),
    },
    #[error("DIMENSION_MISMATCH: {0} vs {1} classes")]
    DimensionMismatch(usize, usize),
    #[error("EMPTY_MATRIX: no evaluated pixels")]
    EmptyMatrix,
    #[error("prediction value {value} is not a class index for {classes} classes")]
    InvalidPrediction { value: u8, classes: usize },
    #[error("target value {value} is neither a class index nor the ignore value")]
    InvalidTarget { value: u8 },
}

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// `counts` is row-major `[truth][prediction]`.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != classes * classes {
            return Err(MetricsError::DimensionMismatch(classes * classes, counts.len()));
        }
        Ok(Self { classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Ground-truth pixels per class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes).map(|r| r.iter().sum()).collect()
    }

    /// Predicted pixels per class.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|p| (0..self.classes).map(|t| self.get(t, p)).sum())
            .collect()
    }

    /// Adds every pixel whose target is not `ignore`.
    pub fn accumulate_slices(&mut self, pred: &[u8], target: &[u8], ignore: u8) -> Result<(), MetricsError> {
        if pred.len() != target.len() {
            return Err(MetricsError::ShapeMismatch {
                pred: (1, pred.len()),
                target: (1, target.len()),
            });
        }
        let c = self.classes;
        for (&p, &t) in pred.iter().zip(target) {
            if t == ignore {
                continue;
            }
            if t as usize >= c {
                return Err(MetricsError::InvalidTarget { value: t });
            }
            if p as usize >= c {
                return Err(MetricsError::InvalidPrediction { value: p, classes: c });
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Row-normalized copy for display; rows without support stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .chunks(self.classes)
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }
}

/// Functional form: returns `cm` plus the counts of one prediction.
pub fn accumulate(
    cm: &ConfusionMatrix,
    pred: &LabelMask,
    target: &LabelMask,
    ignore: u8,
) -> Result<ConfusionMatrix, MetricsError> {
    if pred.dims() != target.dims() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.dims(),
            target: target.dims(),
        });
    }
    let mut out = cm.clone();
    out.accumulate_slices(pred.values(), target.values(), ignore)?;
    Ok(out)
}

pub fn merge(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<ConfusionMatrix, MetricsError> {
    if a.classes != b.classes {
        return Err(MetricsError::DimensionMismatch(a.classes, b.classes));
    }
    Ok(ConfusionMatrix {
        classes: a.classes,
        counts: a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect(),
    })
}

/// Per-class metrics; `None` marks a zero denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub support: u64,
    pub predicted: u64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    /// Pooled pixel accuracy, `trace / total`.
    pub accuracy: f64,
    /// Mean F1 over classes with ground-truth support.
    pub f1_macro: f64,
    /// Mean IoU over classes with ground-truth support.
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes without support, left out of the macro averages.
    pub excluded_classes: Vec<usize>,
}

impl EvalReport {
    pub fn class_recall(&self, class: usize) -> Option<f64> {
        self.per_class.get(class).and_then(|m| m.recall)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derive_metrics(cm: &ConfusionMatrix) -> Result<EvalReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut per_class = Vec::with_capacity(cm.classes);
    let mut excluded = Vec::new();
    let (mut f1_sum, mut iou_sum, mut supported) = (0.0, 0.0, 0usize);
    for c in 0..cm.classes {
        let tp = cm.get(c, c);
        let fn_ = rows[c] - tp;
        let fp = cols[c] - tp;
        let m = ClassMetrics {
            support: rows[c],
            predicted: cols[c],
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
        };
        if rows[c] == 0 {
            excluded.push(c);
        } else {
            f1_sum += m.f1.expect("supported class has an F1");
            iou_sum += m.iou.expect("supported class has an IoU");
            supported += 1;
        }
        per_class.push(m);
    }
    Ok(EvalReport {
        confusion: cm.clone(),
        accuracy: cm.trace() as f64 / total as f64,
        f1_macro: f1_sum / supported as f64,
        miou: iou_sum / supported as f64,
        per_class,
        excluded_classes: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const IGN: u8 = 255;

    #[test]
    fn identity_prediction_is_diagonal() {
        let t = LabelMask::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let cm = accumulate(&ConfusionMatrix::new(3), &t, &t, IGN).unwrap();
        assert_eq!(cm.trace(), 6);
        assert_eq!(cm.total(), 6);
    }

    #[test]
    fn ignored_target_leaves_matrix_unchanged() {
        let p = LabelMask::new(1, 3, vec![0, 1, 2]).unwrap();
        let t = LabelMask::filled(1, 3, IGN);
        let cm = accumulate(&ConfusionMatrix::new(3), &p, &t, IGN).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn two_by_two_enumeration() {
        let p = LabelMask::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let t = LabelMask::new(2, 2, vec![0, 0, 1, IGN]).unwrap();
        let cm = accumulate(&ConfusionMatrix::new(2), &p, &t, IGN).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 1]);
    }

    #[test]
    fn shape_and_value_errors() {
        let p = LabelMask::new(1, 2, vec![0, 0]).unwrap();
        let t = LabelMask::new(2, 1, vec![0, 0]).unwrap();
        assert!(matches!(
            accumulate(&ConfusionMatrix::new(2), &p, &t, IGN),
            Err(MetricsError::ShapeMismatch { .. })
        ));
        let bad = LabelMask::new(1, 2, vec![0, 5]).unwrap();
        let t = LabelMask::new(1, 2, vec![0, 1]).unwrap();
        assert!(matches!(
            accumulate(&ConfusionMatrix::new(2), &bad, &t, IGN),
            Err(MetricsError::InvalidPrediction { .. })
        ));
        assert_eq!(
            merge(&ConfusionMatrix::new(2), &ConfusionMatrix::new(3)).unwrap_err(),
            MetricsError::DimensionMismatch(2, 3)
        );
        assert_eq!(derive_metrics(&ConfusionMatrix::new(2)).unwrap_err(), MetricsError::EmptyMatrix);
    }

    #[test]
    fn diagonal_matrix_is_perfect() {
        let cm = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 2, 0, 0, 0, 9]).unwrap();
        let r = derive_metrics(&cm).unwrap();
        assert_eq!((r.accuracy, r.f1_macro, r.miou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn two_class_hand_computed() {
        // [[3,1],[2,4]]
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let r = derive_metrics(&cm).unwrap();
        assert!((r.accuracy - 0.7).abs() < 1e-15);
        assert!((r.per_class[0].recall.unwrap() - 0.75).abs() < 1e-15);
        assert!((r.per_class[1].recall.unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.per_class[0].precision.unwrap() - 0.6).abs() < 1e-15);
        assert!((r.per_class[1].precision.unwrap() - 0.8).abs() < 1e-15);
        // F1_0 = 2/3, F1_1 = 8/11; IoU_0 = 1/2, IoU_1 = 4/7
        assert!((r.f1_macro - (2.0 / 3.0 + 8.0 / 11.0) / 2.0).abs() < 1e-15);
        assert!((r.miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_excluded() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 1, 0, 0, 0, 0, 0, 5]).unwrap();
        let r = derive_metrics(&cm).unwrap();
        assert_eq!(r.excluded_classes, vec![1]);
        assert_eq!(r.per_class[1].recall, None);
        assert_eq!(r.per_class[1].precision, None);
        assert_eq!(r.per_class[1].f1, None);
        let f1_0 = 8.0 / 9.0;
        let f1_2 = 10.0 / 11.0;
        assert!((r.f1_macro - (f1_0 + f1_2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn merge_identity() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(merge(&cm, &ConfusionMatrix::new(2)).unwrap(), cm);
    }

    #[test]
    fn row_normalization() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 3, 0, 0]).unwrap();
        assert_eq!(cm.row_normalized(), vec![vec![0.25, 0.75], vec![0.0, 0.0]]);
    }
}
